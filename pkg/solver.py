"""
solver.py : stochastic gradient descent in l^r spaces.

The iteration runs in the dual variable:

    z_{k+1} = z_k - mu_{k+1} A_i^T J^Y(A_i x_k - y_i),   x_{k+1} = J^{-1}(z_{k+1})

with i drawn uniformly from the blocks. Landweber replaces the block gradient
by the full one; generalized Kaczmarz uses a residual power q instead of p.
One epoch is N_b iterations for the stochastic methods and one for Landweber.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

import diagnostics
from errors import ConfigurationError, DimensionError, InvalidInputError, InvariantViolation
from noise import make_rng
from operators import (
    BlockOperator,
    ObservationSet,
    apply,
    apply_adjoint,
    apply_adjoint_full,
    apply_full,
    block_norms,
    boyd_operator_norm,
    check_observations,
    stack_blocks,
)
from spaces import (
    SpaceDescriptor,
    as_vector,
    bregman_distance,
    dual_bregman_distance,
    duality_map,
    inverse_duality_map,
    lr_norm,
)

logger = logging.getLogger(__name__)

# ─── CONSTANTS ────────────────────────────────────────────────────────────────
METHODS = ("sgd", "landweber", "generalized_kaczmarz")
SCHEDULES = ("polynomial", "epoch_decay", "constant")
EPOCH_DECAY = 0.05
EPOCH_EXPONENT_SHIFT = 0.01
DEFAULT_THETA = 0.9
G_SAFETY = 1.2
C_SAFETY = 0.8
DUAL_STATE_RTOL = 1e-10
STOP_ROUNDING = 1e-12


# ─── STEP SIZES ───────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class StepSchedule:
    """Step-size rule mu_k, k >= 1.

    polynomial       mu0 * k^-beta
    epoch_decay scale / (1 + 0.05 (k / N_b)^(1/p* + 0.01)), with scale
                     multiplied by L_max when relative_to_lmax is set
    constant         mu0

    n_batches and p_conj of epoch_decay default to the run's values.
    """

    kind: str
    mu0: float = 1.0
    beta: float = 1.0
    scale: float = 1.0
    relative_to_lmax: bool = False
    n_batches: Optional[int] = None
    p_conj: Optional[float] = None

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}, got {self.kind!r}")
        if self.kind in ("polynomial", "constant") and not self.mu0 > 0:
            raise ConfigurationError(f"mu0 must be > 0, got {self.mu0}")
        if self.kind == "polynomial" and not 0 < self.beta <= 1:
            raise ConfigurationError(f"polynomial decay needs 0 < beta <= 1, got {self.beta}")
        if self.kind == "epoch_decay":
            if not self.scale > 0:
                raise ConfigurationError(f"schedule scale must be > 0, got {self.scale}")
            if self.n_batches is not None and self.n_batches < 1:
                raise ConfigurationError(f"n_batches must be >= 1, got {self.n_batches}")
            if self.p_conj is not None and not self.p_conj > 1:
                raise ConfigurationError(f"p* must be > 1, got {self.p_conj}")

    @classmethod
    def polynomial(cls, mu0: float, beta: float) -> "StepSchedule":
        return cls("polynomial", mu0=mu0, beta=beta)

    @classmethod
    def epoch_decay(cls, scale: float, n_batches=None, p_conj=None, relative_to_lmax=False) -> "StepSchedule":
        return cls("epoch_decay", scale=scale, n_batches=n_batches, p_conj=p_conj,
                   relative_to_lmax=relative_to_lmax)

    @classmethod
    def constant(cls, mu0: float) -> "StepSchedule":
        return cls("constant", mu0=mu0)


@dataclass(frozen=True)
class StepContext:
    l_max: float = 1.0
    n_batches: int = 1
    p_conj: float = 2.0


def step_size(schedule: StepSchedule, k: int, context: StepContext = StepContext()) -> float:
    if k < 1:
        raise ConfigurationError(f"step index starts at 1, got {k}")
    if schedule.kind == "polynomial":
        return schedule.mu0 * k ** (-schedule.beta)
    if schedule.kind == "constant":
        return schedule.mu0
    n_b = schedule.n_batches or context.n_batches
    p_conj = schedule.p_conj or context.p_conj
    scale = schedule.scale * (context.l_max if schedule.relative_to_lmax else 1.0)
    return scale / (1.0 + EPOCH_DECAY * (k / n_b) ** (1.0 / p_conj + EPOCH_EXPONENT_SHIFT))


# ─── STOPPING ─────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class StoppingRule:
    """Either a fixed number of epochs or the a-priori rule k(delta)."""

    kind: str
    epochs: int = 0
    delta: float = 0.0
    beta: float = 0.0
    p: float = 2.0
    theta: float = DEFAULT_THETA

    def __post_init__(self):
        if self.kind == "max_epochs":
            if self.epochs < 0:
                raise ConfigurationError(f"max_epochs needs K >= 0, got {self.epochs}")
        elif self.kind == "a_priori":
            if not self.delta > 0:
                raise ConfigurationError(f"a-priori stopping needs delta > 0, got {self.delta}")
            if not 0 < self.theta < 1:
                raise ConfigurationError(f"a-priori safety theta must lie in (0, 1), got {self.theta}")
            if self.beta == 1:
                raise ConfigurationError("a-priori stopping is undefined for beta = 1; use max_epochs")
            if not 0 <= self.beta < 1:
                raise ConfigurationError(f"a-priori stopping needs 0 <= beta < 1, got {self.beta}")
            if not self.p > 1:
                raise ConfigurationError(f"a-priori stopping needs p > 1, got {self.p}")
        else:
            raise ConfigurationError(f"stopping rule must be max_epochs or a_priori, got {self.kind!r}")

    @classmethod
    def max_epochs(cls, epochs: int) -> "StoppingRule":
        return cls("max_epochs", epochs=int(epochs))

    @classmethod
    def a_priori(cls, delta: float, beta: float, p: float, theta: float = DEFAULT_THETA) -> "StoppingRule":
        return cls("a_priori", delta=delta, beta=beta, p=p, theta=theta)


def a_priori_stop_index(rule: StoppingRule) -> int:
    """k(delta) = ceil(delta^(-theta p / (1 - beta)))."""
    if rule.kind != "a_priori":
        raise ConfigurationError("a_priori_stop_index needs an a_priori stopping rule")
    value = rule.delta ** (-rule.theta * rule.p / (1.0 - rule.beta))
    # absorbs the ulp error of pow() on exact powers such as 0.1^-2
    return max(1, math.ceil(value * (1.0 - STOP_ROUNDING)))


# ─── SOLVER CONFIG ────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class SolverConfig:
    method: str
    x_space: SpaceDescriptor
    y_space: SpaceDescriptor
    schedule: StepSchedule
    stopping: StoppingRule
    seed: int = 0
    epochs: int = 1
    q: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.method == "generalized_kaczmarz":
            if self.q is None or not 1 < self.q <= 2:
                raise ConfigurationError(f"generalized Kaczmarz needs 1 < q <= 2, got q={self.q}")
        elif self.q is not None:
            raise ConfigurationError("q is only used by generalized_kaczmarz")
        elif self.y_space.p != self.x_space.p:
            raise ConfigurationError(
                f"{self.method} uses one power p in both spaces; got p_X={self.x_space.p:g}, p_Y={self.y_space.p:g}"
            )
        if self.schedule.kind == "polynomial" and not self.schedule.beta > 1.0 / self.x_space.p_conj:
            raise ConfigurationError(
                f"polynomial steps need 1/p* < beta <= 1; got beta={self.schedule.beta:g}, "
                f"1/p*={1.0 / self.x_space.p_conj:g}"
            )

    @property
    def residual_exponent(self) -> float:
        return self.q if self.method == "generalized_kaczmarz" else self.x_space.p

    @property
    def residual_space(self) -> SpaceDescriptor:
        return SpaceDescriptor(self.y_space.r, self.residual_exponent)


# ─── CONSTANTS OF THE GEOMETRY ────────────────────────────────────────────────
@dataclass(frozen=True)
class ConstantsConfig:
    """Smoothness constant G_{p*} of the dual and convexity constant C_p."""

    g_pstar: float
    c_p: float
    estimation_samples: int = 0

    def __post_init__(self):
        if not (self.g_pstar > 0 and self.c_p > 0):
            raise ConfigurationError(f"constants must be > 0, got G={self.g_pstar}, C={self.c_p}")


def estimate_constants(desc: SpaceDescriptor, dim: int, samples: int, seed: int = 0) -> ConstantsConfig:
    """Sampled surrogates for G_{p*} and C_p, safety-scaled by 1.2 and 0.8.

    G is the running max of p* D*(z*, w*) / ||w* - z*||^p* over dual pairs and
    C the running min of p D(z, w) / ||w - z||^p over primal pairs. Pairs are
    drawn one after the other, so more samples only raise G and lower C.
    """
    if dim < 1 or samples < 1:
        raise ConfigurationError(f"dim and samples must be >= 1, got dim={dim}, samples={samples}")
    rng = make_rng(seed)
    dual = desc.dual
    g_max, c_min = 0.0, math.inf
    for _ in range(samples):
        z, w = rng.standard_normal(dim), rng.standard_normal(dim)
        zs, ws = rng.standard_normal(dim), rng.standard_normal(dim)
        gap = lr_norm(w - z, desc.r)
        if gap > 0:
            c_min = min(c_min, desc.p * bregman_distance(z, w, desc) / gap ** desc.p)
        gap_dual = lr_norm(ws - zs, dual.r)
        if gap_dual > 0:
            g_max = max(g_max, dual.p * dual_bregman_distance(zs, ws, desc) / gap_dual ** dual.p)
    constants = ConstantsConfig(G_SAFETY * g_max, C_SAFETY * c_min, samples)
    logger.debug("constants for %s: G=%.6g C=%.6g (%d samples)", desc, constants.g_pstar, constants.c_p, samples)
    return constants


def theoretical_max_step(constants: ConstantsConfig, l_max: float, p_conj: float) -> float:
    """(p* / (G L_max^p*))^(1 / (p* - 1))."""
    if not (l_max > 0 and p_conj > 1):
        raise ConfigurationError(f"need L_max > 0 and p* > 1, got L_max={l_max}, p*={p_conj}")
    return (p_conj / (constants.g_pstar * l_max ** p_conj)) ** (1.0 / (p_conj - 1.0))


def polynomial_step_bound(constants: ConstantsConfig, l_max: float, p_conj: float) -> float:
    """Largest admissible c0 in mu_k = c0 k^-beta."""
    return theoretical_max_step(constants, l_max, p_conj)


def half_rate_step(constants: ConstantsConfig, l_max: float, p_conj: float) -> float:
    """Constant step with 1 - L_max^p* (G/p*) mu^(p*-1) = 1/2."""
    return theoretical_max_step(constants, l_max, p_conj) * 0.5 ** (1.0 / (p_conj - 1.0))


# ─── ITERATION ────────────────────────────────────────────────────────────────
@dataclass
class IterationState:
    x: np.ndarray
    dual_x: np.ndarray
    k: int
    rng: np.random.Generator
    last_index: Optional[int] = None


def initial_state(cfg: SolverConfig, dim: int, x0=None) -> IterationState:
    x = np.zeros(dim) if x0 is None else as_vector(x0, "x0").copy()
    if x.shape[0] != dim:
        raise DimensionError(f"x0 has length {x.shape[0]}, operator expects {dim}")
    return IterationState(x=x, dual_x=duality_map(x, cfg.x_space), k=0, rng=make_rng(cfg.seed))


def stochastic_gradient(x, obs: ObservationSet, op: BlockOperator, i: int, exponent: float) -> np.ndarray:
    """A_i^T J^Y_exponent(A_i x - y_i)."""
    if not exponent > 1:
        raise ConfigurationError(f"residual exponent must be > 1, got {exponent}")
    residual = apply(op, i, x) - obs.blocks[i]
    return apply_adjoint(op, i, duality_map(residual, SpaceDescriptor(op.output_space.r, exponent)))


def full_gradient(x, obs: ObservationSet, op: BlockOperator, exponent: float) -> np.ndarray:
    residual = apply_full(op, x) - obs.stacked()
    return apply_adjoint_full(op, duality_map(residual, SpaceDescriptor(op.output_space.r, exponent)))


def _advance(state: IterationState, g: np.ndarray, mu: float, cfg: SolverConfig, index) -> IterationState:
    dual_x = state.dual_x - mu * g
    if not np.all(np.isfinite(dual_x)):
        raise InvariantViolation(f"iteration {state.k + 1} produced non-finite values (step {mu:g} too large?)")
    try:
        x = inverse_duality_map(dual_x, cfg.x_space)
    except ArithmeticError as exc:
        raise InvariantViolation(f"iteration {state.k + 1} overflowed in the inverse duality map: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise InvariantViolation(f"iteration {state.k + 1} produced non-finite values (step {mu:g} too large?)")
    return replace(state, x=x, dual_x=dual_x, k=state.k + 1, last_index=index)


def sgd_step(state: IterationState, op: BlockOperator, obs: ObservationSet, cfg: SolverConfig, mu: float) -> IterationState:
    """One step with a block drawn uniformly (with replacement) from the state's generator."""
    i = int(state.rng.integers(op.n_blocks))
    g = stochastic_gradient(state.x, obs, op, i, cfg.residual_exponent)
    return _advance(state, g, mu, cfg, i)


def landweber_step(state: IterationState, op: BlockOperator, obs: ObservationSet, cfg: SolverConfig, mu: float) -> IterationState:
    g = full_gradient(state.x, obs, op, cfg.residual_exponent)
    return _advance(state, g, mu, cfg, None)


def _stepper(cfg: SolverConfig):
    return landweber_step if cfg.method == "landweber" else sgd_step


def iterate(state, op, obs, cfg: SolverConfig, n_steps: int, context: StepContext = StepContext()) -> IterationState:
    step = _stepper(cfg)
    for _ in range(n_steps):
        state = step(state, op, obs, cfg, step_size(cfg.schedule, state.k + 1, context))
    return state


def descent_gap(x_k, x_next, x_hat, g, mu: float, constants: ConstantsConfig, x_space: SpaceDescriptor) -> float:
    """Slack of D(x_{k+1}, x^) <= D(x_k, x^) - mu <g, x_k - x^> + (G/p*) mu^p* ||g||_*^p*.

    Negative means the inequality is violated.
    """
    p_conj = x_space.p_conj
    rhs = (
        bregman_distance(x_k, x_hat, x_space)
        - mu * float(np.dot(g, as_vector(x_k) - as_vector(x_hat)))
        + constants.g_pstar / p_conj * mu ** p_conj * lr_norm(g, x_space.r_conj) ** p_conj
    )
    return rhs - bregman_distance(x_next, x_hat, x_space)


# ─── RUN ──────────────────────────────────────────────────────────────────────
@dataclass
class RunResult:
    record: "diagnostics.ConvergenceRecord"
    state: IterationState
    iterations: int
    context: StepContext


def steps_per_epoch(op: BlockOperator, cfg: SolverConfig) -> int:
    return 1 if cfg.method == "landweber" else op.n_blocks


def make_context(op: BlockOperator, cfg: SolverConfig, seed: int = 0) -> StepContext:
    """L_max and N_b as seen by the schedule: the full operator for Landweber, blocks otherwise."""
    if cfg.method == "landweber":
        l_max = boyd_operator_norm(stack_blocks(op), cfg.x_space.r, cfg.y_space.r, seed=seed).value
        return StepContext(l_max=l_max, n_batches=1, p_conj=cfg.x_space.p_conj)
    l_max = max(est.value for est in block_norms(op, cfg.x_space.r, cfg.y_space.r, seed=seed))
    return StepContext(l_max=l_max, n_batches=op.n_blocks, p_conj=cfg.x_space.p_conj)


def planned_iterations(op: BlockOperator, cfg: SolverConfig) -> tuple[int, int]:
    """(epochs, iterations) for the stopping rule, capped at cfg.epochs."""
    per_epoch = steps_per_epoch(op, cfg)
    if cfg.stopping.kind == "max_epochs":
        epochs = min(cfg.stopping.epochs, cfg.epochs)
        return epochs, epochs * per_epoch
    k_delta = a_priori_stop_index(cfg.stopping)
    epochs = min(math.ceil(k_delta / per_epoch), cfg.epochs)
    return epochs, min(k_delta, epochs * per_epoch)


def _check_dual_state(state: IterationState, cfg: SolverConfig):
    expected = duality_map(state.x, cfg.x_space)
    scale = max(1.0, float(np.max(np.abs(state.dual_x), initial=0.0)))
    if np.max(np.abs(expected - state.dual_x), initial=0.0) > DUAL_STATE_RTOL * scale:
        raise InvariantViolation(f"dual iterate drifted from J_p(x) at iteration {state.k}")


def run(
    op: BlockOperator,
    obs: ObservationSet,
    cfg: SolverConfig,
    reference=None,
    x_hat=None,
    x0=None,
    context: Optional[StepContext] = None,
) -> RunResult:
    """Run the configured method from x0 (zero by default) and record every epoch.

    reference is the true signal for delta1/delta2; x_hat, defaulting to the
    reference, is the Bregman target. Without them those columns are NaN.
    """
    check_observations(op, obs)
    if cfg.y_space.r != op.output_space.r:
        raise ConfigurationError(
            f"solver Y exponent r={cfg.y_space.r:g} differs from operator output space r={op.output_space.r:g}"
        )
    if context is None:
        context = make_context(op, cfg)
    x_ref = None if reference is None else as_vector(reference, "reference")
    x_target = x_ref if x_hat is None else as_vector(x_hat, "x_hat")

    epochs, total = planned_iterations(op, cfg)
    per_epoch = steps_per_epoch(op, cfg)
    step = _stepper(cfg)
    state = initial_state(cfg, op.input_dim, x0)
    record = diagnostics.ConvergenceRecord()
    record.append_state(0, state.x, op, obs, cfg, x_ref, x_target, 0.0)
    logger.info("%s on %d blocks, %s -> %s: %d epochs, %d iterations (seed %d)",
                cfg.method, op.n_blocks, cfg.x_space, cfg.y_space, epochs, total, cfg.seed)

    mu = 0.0
    for epoch in range(1, epochs + 1):
        stop = min(epoch * per_epoch, total)
        try:
            while state.k < stop:
                mu = step_size(cfg.schedule, state.k + 1, context)
                state = step(state, op, obs, cfg, mu)
            _check_dual_state(state, cfg)
            row = record.append_state(epoch, state.x, op, obs, cfg, x_ref, x_target, mu)
        except (ArithmeticError, InvalidInputError) as exc:
            raise InvariantViolation(f"iteration diverged near k={state.k} (epoch {epoch}): {exc}") from exc
        logger.debug("epoch %d: objective=%.6g residual=%.6g", epoch, row.objective, row.residual)
    return RunResult(record=record, state=state, iterations=state.k, context=context)
