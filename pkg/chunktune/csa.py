"""Coupled Simulated Annealing over a bounded scalar domain.

``m`` annealers share generation and acceptance temperatures.  Worse
candidates are accepted with a probability coupled through all current
energies, and the acceptance temperature is steered so the variance of
the acceptance probabilities stays near a desired value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from chunktune import debug, detail_log, trace


class AcceptanceRule(Enum):
    """Direction of the test that accepts a worse candidate."""

    # accept when r < A
    Conventional = "conventional"
    # accept when A < r
    Literal = "literal"


@dataclass(frozen=True)
class CsaParams:
    """Optimizer parameters.

    The defaults are the values used for chunk-size tuning: four
    optimizers, 40 iterations, ``T_gen0 = 100`` and ``T_ac0 = 0.9``.
    ``sigma_d2`` defaults to 99% of the maximum variance ``(m-1)/m^2``.
    """

    t_gen0: float = 100.0
    t_ac0: float = 0.9
    n_iter: int = 40
    m: int = 4
    alpha: float = 0.005
    sigma_d2: Optional[float] = None
    gen_decay: float = 0.99999
    seed: int = 0
    acceptance: AcceptanceRule = AcceptanceRule.Conventional

    class Error(ValueError):
        """Invalid optimizer parameters."""

    def __post_init__(self):
        if not (self.t_gen0 > 0 and self.t_ac0 > 0):
            msg = (
                "Initial temperatures must be positive, got "
                f"t_gen0={self.t_gen0}, t_ac0={self.t_ac0}"
            )
            raise CsaParams.Error(msg)
        if int(self.n_iter) != self.n_iter or self.n_iter < 1:
            msg = f"n_iter must be at least 1, got {self.n_iter}"
            raise CsaParams.Error(msg)
        if int(self.m) != self.m or self.m < 2:
            msg = f"m must be at least 2, got {self.m}"
            raise CsaParams.Error(msg)
        if not 0 < self.alpha <= 0.1:
            msg = f"alpha must be in (0, 0.1], got {self.alpha}"
            raise CsaParams.Error(msg)
        if not 0 < self.gen_decay <= 1:
            msg = f"gen_decay must be in (0, 1], got {self.gen_decay}"
            raise CsaParams.Error(msg)

        if self.sigma_d2 is None:
            object.__setattr__(self, "sigma_d2", 0.99 * self.max_variance)
        elif not 0 <= self.sigma_d2 <= self.max_variance:
            msg = (
                f"sigma_d2 must be in [0, {self.max_variance}], "
                f"got {self.sigma_d2}"
            )
            raise CsaParams.Error(msg)

    @property
    def max_variance(self) -> float:
        """Upper bound ``(m - 1) / m^2`` of the acceptance variance."""
        return (self.m - 1) / self.m**2

    @property
    def desired_variance(self) -> float:
        """The resolved ``sigma_d2``."""
        assert self.sigma_d2 is not None
        return self.sigma_d2

    @property
    def evaluations(self) -> int:
        """Number of cost evaluations of one run, ``m * n_iter``."""
        return self.m * self.n_iter


@dataclass(frozen=True)
class Domain:
    """Closed interval ``[lo, hi]``, optionally restricted to integers."""

    lo: float
    hi: float
    integer: bool = False

    class Error(ValueError):
        """Empty or invalid domain."""

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            msg = f"Domain bounds must be finite: [{self.lo}, {self.hi}]"
            raise Domain.Error(msg)
        if self.integer:
            object.__setattr__(self, "lo", float(math.ceil(self.lo)))
            object.__setattr__(self, "hi", float(math.floor(self.hi)))
        if not self.lo < self.hi:
            msg = f"domain empty: [{self.lo}, {self.hi}]"
            raise Domain.Error(msg)

    def clamp(self, x: float) -> float:
        """Clamp ``x`` into the domain and quantize if required."""
        if self.integer:
            x = float(np.rint(x))
        return min(max(x, self.lo), self.hi)

    def uniform(self, rng: np.random.Generator) -> float:
        """Draw a uniform solution."""
        return self.clamp(rng.uniform(self.lo, self.hi))


class CsaRandom:
    """Reproducible random streams: one per optimizer plus acceptance."""

    def __init__(self, seed: int, m: int):
        """Derive ``m + 1`` independent streams from ``seed``."""
        children = np.random.SeedSequence(seed).spawn(m + 1)
        self.optimizers = [np.random.default_rng(s) for s in children[:m]]
        self.acceptance = np.random.default_rng(children[m])

    def optimizer(self, i: int) -> np.random.Generator:
        """Stream of optimizer ``i``."""
        return self.optimizers[i]


@dataclass
class CsaState:
    """Current and candidate solutions with their energies and temperatures."""

    a: np.ndarray
    b: np.ndarray
    e_a: np.ndarray
    e_b: np.ndarray
    t_gen: float
    t_ac: float
    k: int = 0
    best: tuple[float, float] = (math.nan, math.inf)
    sigma2: Optional[float] = None

    @staticmethod
    def initial(solutions: Sequence[float], params: CsaParams) -> "CsaState":
        """State holding ``solutions`` with energies not yet evaluated."""
        a = np.array(solutions, dtype=np.float64)
        if a.shape != (params.m,):
            msg = f"Expected {params.m} initial solutions, got {a.shape}"
            raise CsaParams.Error(msg)
        return CsaState(
            a=a,
            b=a.copy(),
            e_a=np.full(params.m, np.inf),
            e_b=np.full(params.m, np.inf),
            t_gen=params.t_gen0,
            t_ac=params.t_ac0,
        )

    @property
    def m(self) -> int:
        """Number of optimizers."""
        return len(self.a)

    def record(self, solution: float, energy: float):
        """Update ``best`` with an evaluated solution."""
        if energy < self.best[1]:
            self.best = (solution, energy)


def sample_cauchy(t: float, rng) -> float:
    """Draw a Cauchy variate of scale ``t``.

    ``rng`` needs a ``random()`` method returning floats in ``[0, 1)``;
    zero is redrawn so the variate is finite.
    """
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return t * math.tan(math.pi * (u - 0.5))


def generate_candidates(state: CsaState, domain: Domain, rng: CsaRandom):
    """Fill ``state.b`` with ``a_i + eps_i * t_gen``, clamped.

    ``eps_i`` is a Cauchy variate of scale ``t_gen`` drawn from the
    stream of optimizer ``i``.
    """
    for i in range(state.m):
        eps = sample_cauchy(state.t_gen, rng.optimizer(i))
        state.b[i] = domain.clamp(state.a[i] + eps * state.t_gen)


def acceptance_probabilities(energies: np.ndarray, t_ac: float) -> np.ndarray:
    """Coupled acceptance probability of every current solution.

    Exponents are shifted by the maximum energy so none is positive.
    """
    energies = np.asarray(energies, dtype=np.float64)
    weights = np.exp((energies - energies.max()) / t_ac)
    return weights / weights.sum()


def acceptance_probability(state: CsaState, i: int) -> float:
    """Coupled acceptance probability of current solution ``i``."""
    return float(acceptance_probabilities(state.e_a, state.t_ac)[i])


def acceptance_variance(state: CsaState) -> float:
    """Variance ``mean(A^2) - 1/m^2`` of the acceptance probabilities."""
    probs = acceptance_probabilities(state.e_a, state.t_ac)
    m = state.m
    sigma2 = float(np.sum(probs * probs) / m - 1.0 / (m * m))
    # Rounding can push an all-equal distribution slightly below zero
    return max(sigma2, 0.0)


def update_temperatures(state: CsaState, params: CsaParams):
    """Steer ``t_ac`` towards the desired variance and decay ``t_gen``.

    Uses ``state.sigma2`` when it was computed during the iteration.
    """
    sigma2 = state.sigma2
    if sigma2 is None:
        sigma2 = acceptance_variance(state)

    if sigma2 < params.desired_variance:
        state.t_ac *= 1 - params.alpha
    else:
        state.t_ac *= 1 + params.alpha
    state.t_gen *= params.gen_decay


@dataclass(frozen=True)
class Evaluation:
    """One cost evaluation."""

    iteration: int
    optimizer: int
    solution: float
    energy: float


@dataclass
class CsaResult:
    """Outcome of ``minimize``."""

    solution: float
    energy: float
    trace: list[Evaluation] = field(default_factory=list)
    best_history: list[float] = field(default_factory=list)


CostFunction = Callable[[float], float]


class CoupledAnnealer:
    """Runs the CSA iterations for a cost function over a domain.

    Iteration 0 evaluates the initial solutions, every later iteration
    evaluates one candidate per optimizer, so a run costs ``m * n_iter``
    evaluations.  Evaluations are sequential, in optimizer order.
    """

    class CostError(RuntimeError):
        """The cost function failed."""

        def __init__(self, msg: str, iteration: int, optimizer: int):
            """Record where the evaluation failed."""
            super().__init__(msg)
            self.iteration = iteration
            self.optimizer = optimizer

    def __init__(
        self,
        cost: CostFunction,
        domain: Domain,
        params: CsaParams,
        on_evaluation: Optional[Callable[[Evaluation], None]] = None,
    ):
        """Prepare a run; nothing is evaluated until ``run``."""
        self.cost = cost
        self.domain = domain
        self.params = params
        self.on_evaluation = on_evaluation
        self.rng = CsaRandom(params.seed, params.m)
        self.result = CsaResult(math.nan, math.inf)

    def initial_solutions(self) -> list[float]:
        """Independent uniform draws, one per optimizer."""
        return [
            self.domain.uniform(self.rng.optimizer(i))
            for i in range(self.params.m)
        ]

    def _evaluate(self, state: CsaState, i: int, solution: float) -> float:
        try:
            energy = float(self.cost(solution))
        except Exception as e:
            msg = (
                f"Cost evaluation failed at iteration {state.k}, "
                f"optimizer {i} (solution {solution}): {e}"
            )
            raise CoupledAnnealer.CostError(msg, state.k, i) from e

        evaluation = Evaluation(state.k, i, solution, energy)
        self.result.trace.append(evaluation)
        state.record(solution, energy)
        if self.on_evaluation is not None:
            self.on_evaluation(evaluation)

        detail_log(
            "CSA k={} i={} x={} E={:.6g}", state.k, i, solution, energy
        )
        return energy

    def _accept(self, state: CsaState, probs: np.ndarray):
        rule = self.params.acceptance
        for i in range(state.m):
            if state.e_b[i] <= state.e_a[i]:
                accept = True
            else:
                r = self.rng.acceptance.random()
                if rule is AcceptanceRule.Conventional:
                    accept = r < probs[i]
                else:
                    accept = probs[i] < r
            if accept:
                state.a[i] = state.b[i]
                state.e_a[i] = state.e_b[i]

    def run(self, initial: Optional[Sequence[float]] = None) -> CsaResult:
        """Minimize the cost and return the best evaluated solution."""
        params = self.params
        if initial is None:
            initial = self.initial_solutions()
        state = CsaState.initial(
            [self.domain.clamp(x) for x in initial], params
        )

        for i in range(state.m):
            state.e_a[i] = self._evaluate(state, i, float(state.a[i]))
        self.result.best_history.append(state.best[1])

        for k in range(1, params.n_iter):
            state.k = k
            generate_candidates(state, self.domain, self.rng)
            for i in range(state.m):
                state.e_b[i] = self._evaluate(state, i, float(state.b[i]))

            probs = acceptance_probabilities(state.e_a, state.t_ac)
            state.sigma2 = acceptance_variance(state)
            self._accept(state, probs)
            update_temperatures(state, params)
            state.sigma2 = None

            self.result.best_history.append(state.best[1])
            trace(
                "CSA iteration {}: best {} ({:.6g}), t_gen={:.6g} t_ac={:.6g}",
                k,
                state.best[0],
                state.best[1],
                state.t_gen,
                state.t_ac,
            )

        self.result.solution, self.result.energy = state.best
        debug(
            "CSA finished: best solution {} with energy {:.6g}",
            self.result.solution,
            self.result.energy,
        )
        return self.result


def minimize(
    cost: CostFunction,
    domain: Domain,
    params: CsaParams,
    initial: Optional[Sequence[float]] = None,
    on_evaluation: Optional[Callable[[Evaluation], None]] = None,
) -> CsaResult:
    """Minimize ``cost`` over ``domain``, see ``CoupledAnnealer``."""
    annealer = CoupledAnnealer(cost, domain, params, on_evaluation)
    return annealer.run(initial)
