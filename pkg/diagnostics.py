"""
diagnostics.py : metrics, bound calculators and seed ensembles.

ConvergenceRecord is the per-epoch trace written by solver.run. The bound
calculators (polyak_bound, rate_envelope, ...) are closed-form envelopes
compared against measured traces in the test-suite. monte_carlo_mean and
stability_probe approximate expectations by averaging over seeds.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
from scipy import linalg

from errors import ConfigurationError, DataFileError, InvalidInputError, InvariantViolation
from noise import perturbation_direction
from operators import BlockOperator, ObservationSet, apply, apply_full, check_observations
from spaces import SpaceDescriptor, as_vector, bregman_distance, duality_map, lr_norm

logger = logging.getLogger(__name__)

# ─── CONSTANTS ────────────────────────────────────────────────────────────────
TRACE_COLUMNS = ("epoch", "objective", "residual", "bregman", "delta1", "delta2", "step")
REFERENCE_COLUMNS = ("bregman", "delta1", "delta2")
SUPPORT_THRESHOLD_FRACTION = 0.1
REFERENCE_LANDWEBER_STEPS = 100_000
CSV_FORMAT = "%.17g"


# ─── OBJECTIVE & METRICS ──────────────────────────────────────────────────────
def objective(x, op: BlockOperator, obs: ObservationSet, exponent: float) -> float:
    """Psi(x) = (1/N) sum_i (1/exponent) ||A_i x - y_i||^exponent."""
    check_observations(op, obs)
    r_y = op.output_space.r
    total = sum(lr_norm(apply(op, i, x) - obs.blocks[i], r_y) ** exponent for i in range(op.n_blocks))
    return total / (exponent * op.n_blocks)


def residual_norm(x, op: BlockOperator, obs: ObservationSet) -> float:
    check_observations(op, obs)
    return lr_norm(apply_full(op, x) - obs.stacked(), op.output_space.r)


def objective_lower_bound(x, op, obs, p: float, c_n: float) -> float:
    """(C_N / p) ||Ax - y||^p; C_N = 1/N when Y is a Hilbert space."""
    return c_n / p * residual_norm(x, op, obs) ** p


def delta_metrics(x, x_true) -> tuple[float, float]:
    """Relative l^1 and l^2 errors against x_true."""
    xt = as_vector(x_true, "x_true")
    err = as_vector(x) - xt
    n1, n2 = np.sum(np.abs(xt)), np.linalg.norm(xt)
    if n1 == 0.0:
        raise InvalidInputError("delta metrics need a nonzero reference signal")
    return float(np.sum(np.abs(err)) / n1), float(np.linalg.norm(err) / n2)


def support_f1(x, x_true, threshold: Optional[float] = None) -> float:
    """F1 of {|x_j| > threshold} against the support of x_true.

    threshold defaults to 0.1 max|x_true|.
    """
    xt = as_vector(x_true, "x_true")
    if threshold is None:
        threshold = SUPPORT_THRESHOLD_FRACTION * float(np.max(np.abs(xt), initial=0.0))
    if not threshold > 0:
        raise ConfigurationError(f"support threshold must be > 0, got {threshold}")
    predicted = np.abs(as_vector(x)) > threshold
    truth = np.abs(xt) > 0
    tp = int(np.sum(predicted & truth))
    fp = int(np.sum(predicted & ~truth))
    fn = int(np.sum(~predicted & truth))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


# ─── CONVERGENCE RECORD ───────────────────────────────────────────────────────
@dataclass
class ConvergenceRow:
    epoch: int
    objective: float
    residual: float
    bregman: float
    delta1: float
    delta2: float
    step: float

    def values(self) -> tuple:
        return tuple(getattr(self, name) for name in TRACE_COLUMNS)


@dataclass
class ConvergenceRecord:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def append_state(self, epoch, x, op, obs, cfg, reference, x_hat, step) -> ConvergenceRow:
        bregman = math.nan if x_hat is None else bregman_distance(x, x_hat, cfg.x_space)
        d1, d2 = (math.nan, math.nan) if reference is None else delta_metrics(x, reference)
        row = ConvergenceRow(
            epoch=epoch,
            objective=objective(x, op, obs, cfg.residual_exponent),
            residual=residual_norm(x, op, obs),
            bregman=bregman,
            delta1=d1,
            delta2=d2,
            step=float(step),
        )
        self.rows.append(row)
        return row

    def column(self, name: str) -> np.ndarray:
        if name not in TRACE_COLUMNS:
            raise ConfigurationError(f"unknown trace column {name!r}; expected one of {TRACE_COLUMNS}")
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def as_array(self) -> np.ndarray:
        return np.array([r.values() for r in self.rows], dtype=float).reshape(-1, len(TRACE_COLUMNS))

    def validate(self):
        """Epochs strictly increasing; values finite (reference columns may be NaN throughout)."""
        data = self.as_array()
        if len(data) > 1 and np.any(np.diff(data[:, 0]) <= 0):
            raise InvariantViolation("trace epochs are not strictly increasing")
        for j, name in enumerate(TRACE_COLUMNS):
            col = data[:, j]
            if np.all(np.isfinite(col)):
                continue
            if name in REFERENCE_COLUMNS and np.all(np.isnan(col)):
                continue
            raise InvariantViolation(f"trace column {name!r} has non-finite entries")

    def to_csv(self, path):
        try:
            np.savetxt(path, self.as_array(), delimiter=",", fmt=CSV_FORMAT,
                       header=",".join(TRACE_COLUMNS), comments="")
        except OSError as exc:
            raise DataFileError(f"cannot write trace {path}: {exc}") from exc

    @classmethod
    def from_csv(cls, path) -> "ConvergenceRecord":
        try:
            with open(path, encoding="utf-8") as fh:
                header = fh.readline().strip()
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        except OSError as exc:
            raise DataFileError(f"cannot read trace {path}: {exc}") from exc
        except ValueError as exc:
            raise DataFileError(f"malformed trace {path}: {exc}") from exc
        if header != ",".join(TRACE_COLUMNS) or data.shape[1:] != (len(TRACE_COLUMNS),):
            raise DataFileError(f"trace {path} does not have the columns {TRACE_COLUMNS}")
        rows = [ConvergenceRow(int(r[0]), *map(float, r[1:])) for r in data]
        return cls(rows)


# ─── BOUND CALCULATORS ────────────────────────────────────────────────────────
def _check_steps(steps) -> np.ndarray:
    mu = np.asarray(steps, dtype=float).reshape(-1)
    if np.any(mu < 0) or not np.all(np.isfinite(mu)):
        raise ConfigurationError("step sequences must be finite and non-negative")
    return mu


def polyak_bound(delta0: float, alpha: float, steps) -> np.ndarray:
    """Delta0 (1 + alpha Delta0^alpha sum_{n<=N} mu_n)^(-1/alpha) for N = 1..len(steps)."""
    if delta0 < 0 or not alpha > 0:
        raise ConfigurationError(f"need Delta0 >= 0 and alpha > 0, got {delta0}, {alpha}")
    mu = _check_steps(steps)
    if delta0 == 0:
        return np.zeros_like(mu)
    return delta0 * (1.0 + alpha * delta0 ** alpha * np.cumsum(mu)) ** (-1.0 / alpha)


def polyak_recursion(delta0: float, alpha: float, steps) -> np.ndarray:
    """delta_{n+1} = delta_n - mu_{n+1} delta_n^(1 + alpha), returned for n = 1..len(steps)."""
    mu = _check_steps(steps)
    out = np.empty_like(mu)
    d = float(delta0)
    for n, m in enumerate(mu):
        d = d - m * d ** (1.0 + alpha)
        out[n] = d
    return out


def rate_envelope(delta0: float, alpha: float, per_step) -> np.ndarray:
    """Expected-Bregman envelope under conditional stability of order alpha >= 1."""
    if alpha < 1:
        raise ConfigurationError(f"rate envelope needs alpha >= 1, got {alpha}")
    total = np.cumsum(_check_steps(per_step))
    if alpha == 1:
        return delta0 * np.exp(-total)
    a = alpha - 1.0
    if delta0 == 0:
        return np.zeros_like(total)
    return delta0 * np.exp(-np.log1p(a * delta0 ** a * total) / a)


def rate_coefficients(c_n, c_alpha, l_max, g_pstar, p_conj, steps) -> np.ndarray:
    """mu_k C_k with C_k = C_N C_alpha (1 - L_max^p* (G/p*) mu_k^(p*-1))."""
    mu = _check_steps(steps)
    return mu * c_n * c_alpha * (1.0 - l_max ** p_conj * (g_pstar / p_conj) * mu ** (p_conj - 1.0))


def regularization_budget(delta: float, p: float, steps) -> float:
    """delta^p sum mu_l."""
    return float(delta ** p * np.sum(_check_steps(steps)))


def coercivity_bound(x_true, c: float, desc: SpaceDescriptor) -> float:
    """(2 p*)^p max(||x_true||^p, C)."""
    return (2.0 * desc.p_conj) ** desc.p * max(lr_norm(x_true, desc.r) ** desc.p, c)


# ─── REFERENCE SOLUTION ───────────────────────────────────────────────────────
def reference_solution(op: BlockOperator, obs: ObservationSet, x_space: SpaceDescriptor,
                       steps: int = REFERENCE_LANDWEBER_STEPS, seed: int = 0) -> np.ndarray:
    """Minimum-norm solution of Ax = y.

    Hilbert spaces use a dense least-norm solve. Otherwise Landweber runs from
    zero for `steps` iterations at the half-rate constant step.
    """
    import solver

    check_observations(op, obs)
    a = np.vstack(op.blocks)
    y = obs.stacked()
    if x_space.r == 2.0 and op.output_space.r == 2.0:
        x, *_ = linalg.lstsq(a, y, lapack_driver="gelsd")
        return x
    cfg = solver.SolverConfig(
        method="landweber",
        x_space=x_space,
        y_space=SpaceDescriptor(op.output_space.r, x_space.p),
        schedule=solver.StepSchedule.constant(1.0),
        stopping=solver.StoppingRule.max_epochs(steps),
        seed=seed,
        epochs=max(steps, 1),
    )
    context = solver.make_context(op, cfg, seed=seed)
    constants = solver.estimate_constants(x_space, op.input_dim, samples=200, seed=seed)
    mu = solver.half_rate_step(constants, context.l_max, x_space.p_conj)
    cfg = replace(cfg, schedule=solver.StepSchedule.constant(mu))
    state = solver.iterate(solver.initial_state(cfg, op.input_dim), op, obs, cfg, steps, context)
    logger.info("reference solution: %d Landweber steps at mu=%.4g, residual %.4g",
                steps, mu, residual_norm(state.x, op, obs))
    return state.x


# ─── SEED ENSEMBLES ───────────────────────────────────────────────────────────
@dataclass
class RunSpec:
    """Everything a worker process needs to run one seed."""

    op: BlockOperator
    obs: ObservationSet
    cfg: object
    reference: Optional[np.ndarray] = None
    x_hat: Optional[np.ndarray] = None
    context: object = None


@dataclass
class EnsembleSummary:
    column: str
    epochs: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n_seeds: int

    def to_csv(self, path):
        data = np.column_stack([self.epochs, self.mean, self.stderr])
        try:
            np.savetxt(path, data, delimiter=",", fmt=CSV_FORMAT, header=f"epoch,mean_{self.column},stderr_{self.column}",
                       comments="")
        except OSError as exc:
            raise DataFileError(f"cannot write ensemble summary {path}: {exc}") from exc


def run_seed(spec: RunSpec, seed: int):
    import solver

    return solver.run(spec.op, spec.obs, replace(spec.cfg, seed=seed), spec.reference, spec.x_hat,
                      context=spec.context)


def run_seeds(spec: RunSpec, seeds, jobs: int = 1) -> list:
    """solver.run for each seed, results in seed order."""
    seeds = list(seeds)
    if jobs <= 1 or len(seeds) == 1:
        return [run_seed(spec, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_seed, [spec] * len(seeds), seeds))


def summarize(records, reducer: Union[str, Callable] = "bregman") -> EnsembleSummary:
    """Per-epoch mean and standard error (ddof=1) across records."""
    if len(records) < 2:
        raise ConfigurationError(f"an ensemble needs at least 2 seeds, got {len(records)}")
    name = reducer if isinstance(reducer, str) else getattr(reducer, "__name__", "value")
    extract = (lambda rec: rec.column(reducer)) if isinstance(reducer, str) else reducer
    values = np.vstack([np.asarray(extract(rec), dtype=float) for rec in records])
    n = values.shape[0]
    return EnsembleSummary(
        column=name,
        epochs=records[0].column("epoch"),
        mean=values.mean(axis=0),
        stderr=values.std(axis=0, ddof=1) / math.sqrt(n),
        n_seeds=n,
    )


def monte_carlo_mean(spec: RunSpec, n_seeds: int, reducer: Union[str, Callable] = "bregman",
                     jobs: int = 1) -> EnsembleSummary:
    """Runs seeds cfg.seed .. cfg.seed + n_seeds - 1 and averages the chosen column per epoch."""
    import solver

    if n_seeds < 2:
        raise ConfigurationError(f"monte carlo needs n_seeds >= 2, got {n_seeds}")
    if spec.context is None:
        spec = replace(spec, context=solver.make_context(spec.op, spec.cfg))
    base = spec.cfg.seed
    results = run_seeds(spec, range(base, base + n_seeds), jobs)
    return summarize([res.record for res in results], reducer)


# ─── STABILITY ────────────────────────────────────────────────────────────────
@dataclass
class StabilityRow:
    delta: float
    bregman: float
    primal_gap: float
    dual_gap: float


def _split_like(obs: ObservationSet, stacked: np.ndarray, noise_level: float) -> ObservationSet:
    sizes = np.cumsum([len(b) for b in obs.blocks])[:-1]
    return ObservationSet(blocks=np.split(stacked, sizes), noise_level=noise_level)


def stability_probe(op: BlockOperator, obs: ObservationSet, cfg, k_fixed: int, deltas,
                    n_seeds: int = 20, context=None) -> list[StabilityRow]:
    """Coupled clean/noisy runs to iteration k_fixed, averaged over seeds.

    For seed s the data are shifted by delta e_s with a fixed unit direction
    e_s, and both runs draw the same block indices. Reports mean
    D(x^delta_k, x_k), ||x^delta_k - x_k|| and ||J(x^delta_k) - J(x_k)||_*.
    """
    import solver

    check_observations(op, obs)
    if context is None:
        context = solver.make_context(op, cfg)
    x_space = cfg.x_space
    clean = obs.stacked()
    sums = {float(d): np.zeros(3) for d in deltas}
    for s in range(cfg.seed, cfg.seed + n_seeds):
        seeded = replace(cfg, seed=s)
        x_k = solver.iterate(solver.initial_state(seeded, op.input_dim), op, obs, seeded, k_fixed, context).x
        direction = perturbation_direction(clean.size, op.output_space.r, s)
        for delta in sums:
            noisy_obs = _split_like(obs, clean + delta * direction, delta)
            x_d = solver.iterate(solver.initial_state(seeded, op.input_dim), op, noisy_obs, seeded, k_fixed,
                                 context).x
            sums[delta] += (
                bregman_distance(x_d, x_k, x_space),
                lr_norm(x_d - x_k, x_space.r),
                lr_norm(duality_map(x_d, x_space) - duality_map(x_k, x_space), x_space.r_conj),
            )
    rows = [StabilityRow(d, *(v / n_seeds)) for d, v in sums.items()]
    logger.debug("stability probe at k=%d over %d seeds: %s", k_fixed, n_seeds, rows)
    return rows
