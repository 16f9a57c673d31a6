"""
operators.py : row-partitioned forward operators.

Dense block operators A = (A_1; ...; A_N), the two test problems (the
Green's-function integral equation on [0, 1] and 2D parallel-beam CT), and
Boyd's power method for ||A|| between l^rX and l^rY.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import ConfigurationError, DataFileError, DimensionError, InvalidInputError
from noise import make_rng
from spaces import SpaceDescriptor, as_vector, duality_map, lr_norm

logger = logging.getLogger(__name__)

# ─── CONSTANTS ────────────────────────────────────────────────────────────────
KERNEL_SCALE = 40.0
SIGNAL_SUPPORT = (
    (9 / 40, 11 / 40, 1.0),
    (19 / 40, 21 / 40, 2.0),
    (29 / 40, 31 / 40, 1.0),
)
# (centre x, centre y, radius) as fractions of the grid side, then intensity
PHANTOM_DISKS = (
    (0.30, 0.35, 0.10, 1.0),
    (0.65, 0.30, 0.08, 2.0),
    (0.50, 0.70, 0.12, 1.0),
    (0.72, 0.68, 0.06, 2.0),
)
AXIS_EPS = 1e-12
BOYD_TOL = 1e-10
BOYD_MAX_ITER = 1000


# ─── BLOCK OPERATOR ───────────────────────────────────────────────────────────
@dataclass
class BlockOperator:
    """Ordered dense blocks A_i sharing the column count n.

    row_indices[i] lists the rows of the full matrix held by block i; it is
    filled by partition_rows and lets stack_blocks restore the original order.
    """

    blocks: list
    output_space: SpaceDescriptor = field(default_factory=SpaceDescriptor.hilbert)
    input_dim: Optional[int] = None
    row_indices: Optional[list] = None

    def __post_init__(self):
        if not self.blocks:
            raise ConfigurationError("a block operator needs at least one block")
        self.blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in self.blocks]
        if self.input_dim is None:
            self.input_dim = self.blocks[0].shape[1]
        for i, b in enumerate(self.blocks):
            if b.ndim != 2 or b.shape[1] != self.input_dim:
                raise DimensionError(f"block {i} has shape {b.shape}, expected (*, {self.input_dim})")
        if self.row_indices is not None:
            if len(self.row_indices) != len(self.blocks):
                raise DimensionError("row_indices needs one entry per block")
            for i, (b, idx) in enumerate(zip(self.blocks, self.row_indices)):
                if len(idx) != b.shape[0]:
                    raise DimensionError(f"block {i}: {b.shape[0]} rows but {len(idx)} row indices")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def block_sizes(self) -> list[int]:
        return [b.shape[0] for b in self.blocks]

    @property
    def n_rows(self) -> int:
        return sum(self.block_sizes)


@dataclass
class ObservationSet:
    """Per-block data y_i and the noise level delta (0 for exact data)."""

    blocks: list
    noise_level: float = 0.0

    def __post_init__(self):
        self.blocks = [as_vector(b, "y_i") for b in self.blocks]
        if not (math.isfinite(self.noise_level) and self.noise_level >= 0):
            raise InvalidInputError(f"noise level must be >= 0, got {self.noise_level}")

    def stacked(self) -> np.ndarray:
        """Data concatenated in block order (matches apply_full)."""
        return np.concatenate(self.blocks)


def _block(op: BlockOperator, i: int) -> np.ndarray:
    if not 0 <= i < op.n_blocks:
        raise DimensionError(f"block index {i} out of range [0, {op.n_blocks})")
    return op.blocks[i]


def check_observations(op: BlockOperator, obs: ObservationSet):
    if len(obs.blocks) != op.n_blocks:
        raise DimensionError(f"{len(obs.blocks)} data blocks for {op.n_blocks} operator blocks")
    for i, (b, y) in enumerate(zip(op.blocks, obs.blocks)):
        if y.shape[0] != b.shape[0]:
            raise DimensionError(f"data block {i} has length {y.shape[0]}, operator block has {b.shape[0]} rows")


# ─── APPLICATION ──────────────────────────────────────────────────────────────
def apply(op: BlockOperator, i: int, x) -> np.ndarray:
    a = _block(op, i)
    v = as_vector(x)
    if v.shape[0] != op.input_dim:
        raise DimensionError(f"x has length {v.shape[0]}, operator expects {op.input_dim}")
    return a @ v


def apply_adjoint(op: BlockOperator, i: int, ys) -> np.ndarray:
    a = _block(op, i)
    v = as_vector(ys, "ys")
    if v.shape[0] != a.shape[0]:
        raise DimensionError(f"dual vector has length {v.shape[0]}, block {i} has {a.shape[0]} rows")
    return a.T @ v


def apply_full(op: BlockOperator, x) -> np.ndarray:
    return np.concatenate([apply(op, i, x) for i in range(op.n_blocks)])


def apply_adjoint_full(op: BlockOperator, ys) -> np.ndarray:
    v = as_vector(ys, "ys")
    if v.shape[0] != op.n_rows:
        raise DimensionError(f"dual vector has length {v.shape[0]}, operator has {op.n_rows} rows")
    out = np.zeros(op.input_dim)
    start = 0
    for b in op.blocks:
        stop = start + b.shape[0]
        out += b.T @ v[start:stop]
        start = stop
    return out


# ─── PARTITIONING ─────────────────────────────────────────────────────────────
def partition_rows(full, n_batches: int, output_space: Optional[SpaceDescriptor] = None) -> BlockOperator:
    """Block j gets rows j, j + N_b, j + 2 N_b, ... of the full matrix."""
    a = np.atleast_2d(np.asarray(full, dtype=float))
    n_rows = a.shape[0]
    if n_batches < 1 or n_rows % n_batches != 0:
        raise ConfigurationError(f"N_b={n_batches} must divide the row count {n_rows}")
    indices = [np.arange(j, n_rows, n_batches) for j in range(n_batches)]
    return BlockOperator(
        blocks=[a[idx] for idx in indices],
        output_space=output_space or SpaceDescriptor.hilbert(),
        input_dim=a.shape[1],
        row_indices=indices,
    )


def stack_blocks(op: BlockOperator) -> np.ndarray:
    """Full matrix in original row order."""
    if op.row_indices is None:
        return np.vstack(op.blocks)
    full = np.empty((op.n_rows, op.input_dim))
    for b, idx in zip(op.blocks, op.row_indices):
        full[idx] = b
    return full


def observe(op: BlockOperator, y_full, noise_level: float = 0.0) -> ObservationSet:
    """Split full-length data along the operator's row partition."""
    y = as_vector(y_full, "y")
    if y.shape[0] != op.n_rows:
        raise DimensionError(f"data has length {y.shape[0]}, operator has {op.n_rows} rows")
    if op.row_indices is None:
        parts = np.split(y, np.cumsum(op.block_sizes)[:-1])
    else:
        parts = [y[idx] for idx in op.row_indices]
    return ObservationSet(blocks=parts, noise_level=noise_level)


# ─── INTEGRAL EQUATION ────────────────────────────────────────────────────────
def integral_kernel(t, s) -> np.ndarray:
    """kappa(t, s) = 40 t (1 - s) for t <= s, 40 s (1 - t) otherwise."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    return np.where(t <= s, KERNEL_SCALE * t * (1.0 - s), KERNEL_SCALE * s * (1.0 - t))


def build_integral_operator(n: int, midpoint_columns: bool = True) -> np.ndarray:
    """Rectangle-rule discretisation: A[j, k] = kappa(t_j, s_k) / n.

    Rows sit at t_j = j / n. Columns sit at the cell midpoints (2k + 1) / (2n)
    by default; midpoint_columns=False uses the nodes (2k + 1) / n instead.
    Row 0 vanishes (t = 0), so A is singular.
    """
    if n < 2:
        raise ConfigurationError(f"discretisation size must be >= 2, got {n}")
    t = np.arange(n) / n
    k = np.arange(n)
    s = (2 * k + 1) / (2 * n) if midpoint_columns else (2 * k + 1) / n
    return integral_kernel(t[:, None], s[None, :]) / n


def exact_sparse_signal(n: int) -> np.ndarray:
    """x_true sampled at the cell midpoints (2j + 1) / (2n)."""
    if n < 40:
        raise ConfigurationError(f"signal size must be >= 40 to resolve its support, got {n}")
    s = (2 * np.arange(n) + 1) / (2 * n)
    x = np.zeros(n)
    for lo, hi, value in SIGNAL_SUPPORT:
        x[(s >= lo) & (s <= hi)] = value
    return x


# ─── COMPUTED TOMOGRAPHY ──────────────────────────────────────────────────────
@dataclass(frozen=True)
class RadonGeometry:
    """Parallel-beam geometry on a square pixel grid centred at the origin.

    Angles are a * angle_step degrees; the detector row spans the grid's
    circumscribed circle with n_detectors equally spaced offsets.
    """

    grid_side: int = 64
    n_angles: int = 60
    angle_step: float = 3.0
    n_detectors: int = 95
    pixel_size: float = 0.1

    def __post_init__(self):
        for name in ("grid_side", "n_angles", "n_detectors"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.pixel_size > 0:
            raise ConfigurationError(f"pixel_size must be > 0, got {self.pixel_size}")
        if self.angle_step < 0 or (self.n_angles - 1) * self.angle_step > 180.0 + 1e-9:
            raise ConfigurationError(
                f"angle coverage {(self.n_angles - 1) * self.angle_step:g} deg exceeds 180 deg"
            )

    @property
    def half_width(self) -> float:
        return 0.5 * self.grid_side * self.pixel_size

    @property
    def detector_spacing(self) -> float:
        return 2.0 * math.sqrt(2.0) * self.half_width / self.n_detectors

    def angles(self) -> np.ndarray:
        return np.deg2rad(np.arange(self.n_angles) * self.angle_step)

    def detector_offsets(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2.0) * self.detector_spacing


def _trig(theta: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    return (0.0 if abs(c) < AXIS_EPS else c), (0.0 if abs(s) < AXIS_EPS else s)


def _trace_ray(point, direction, geom: RadonGeometry):
    """Pixel indices and intersection lengths of one ray (Siddon traversal).

    The ray is point + t * direction with a unit direction, so t differences
    are physical lengths.
    """
    half = geom.half_width
    h = geom.pixel_size
    g = geom.grid_side
    t_min, t_max = -math.inf, math.inf
    for p_a, d_a in zip(point, direction):
        if d_a != 0.0:
            t1, t2 = (-half - p_a) / d_a, (half - p_a) / d_a
            t_min, t_max = max(t_min, min(t1, t2)), min(t_max, max(t1, t2))
        elif p_a < -half or p_a > half:
            return None
    if t_max - t_min <= AXIS_EPS:
        return None

    crossings = [np.array([t_min, t_max])]
    lines = -half + np.arange(g + 1) * h
    for p_a, d_a in zip(point, direction):
        if d_a != 0.0:
            t = (lines - p_a) / d_a
            crossings.append(t[(t > t_min) & (t < t_max)])
    t = np.unique(np.concatenate(crossings))
    lengths = np.diff(t)
    mid = 0.5 * (t[:-1] + t[1:])
    ix = np.clip(np.floor((point[0] + mid * direction[0] + half) / h).astype(int), 0, g - 1)
    iy = np.clip(np.floor((point[1] + mid * direction[1] + half) / h).astype(int), 0, g - 1)
    keep = lengths > AXIS_EPS * h
    return iy[keep] * g + ix[keep], lengths[keep]


def build_radon_operator(geom: RadonGeometry) -> np.ndarray:
    """Ray-by-pixel intersection-length matrix, rows ordered (angle, detector).

    Images are flattened row-major with the row index increasing in y. Rays
    that miss the grid keep a zero row.
    """
    g = geom.grid_side
    offsets = geom.detector_offsets()
    a = np.zeros((geom.n_angles * geom.n_detectors, g * g))
    missed = 0
    for ia, theta in enumerate(geom.angles()):
        c, s = _trig(theta)
        for idet, u in enumerate(offsets):
            traced = _trace_ray((-u * s, u * c), (c, s), geom)
            if traced is None:
                missed += 1
                continue
            pixels, lengths = traced
            np.add.at(a[ia * geom.n_detectors + idet], pixels, lengths)
    logger.debug("radon matrix %s built, %d rays miss the grid", a.shape, missed)
    return a


def sparse_disk_phantom(grid_side: int) -> np.ndarray:
    """Disjoint constant disks on a zero background, flattened row-major."""
    if grid_side < 16:
        raise ConfigurationError(f"phantom grid side must be >= 16, got {grid_side}")
    centres = (np.arange(grid_side) + 0.5) / grid_side
    xx, yy = np.meshgrid(centres, centres)
    img = np.zeros((grid_side, grid_side))
    for cx, cy, radius, value in PHANTOM_DISKS:
        img[(xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2] = value
    return img.reshape(-1)


# ─── OPERATOR NORMS ───────────────────────────────────────────────────────────
@dataclass
class NormEstimate:
    value: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def _boyd_single(a, x, r_x, r_y, tol, max_iter):
    to_dual_y = SpaceDescriptor(r_y, r_y)
    x_dual_dual = SpaceDescriptor(r_x, r_x).dual
    x = x / lr_norm(x, r_x)
    estimate = lr_norm(a @ x, r_y)
    history = [estimate]
    for it in range(1, max_iter + 1):
        v = a.T @ duality_map(a @ x, to_dual_y)
        if not np.any(v):
            return NormEstimate(estimate, it, True, history)
        x = duality_map(v, x_dual_dual)
        x = x / lr_norm(x, r_x)
        new = lr_norm(a @ x, r_y)
        history.append(new)
        if abs(new - estimate) <= tol * max(new, 1e-300):
            return NormEstimate(new, it, True, history)
        estimate = new
    return NormEstimate(estimate, max_iter, False, history)


def boyd_operator_norm(
    a,
    r_x: float,
    r_y: float,
    tol: float = BOYD_TOL,
    max_iter: int = BOYD_MAX_ITER,
    seed: int = 0,
    n_starts: int = 1,
) -> NormEstimate:
    """Lower estimate of ||A|| from l^r_x to l^r_y by Boyd's power method.

    Each sweep maps x to J(A^T J(Ax)) and renormalises; the ratio
    ||Ax|| / ||x|| never decreases. Start 0 is strictly positive, later starts
    have random signs; the best start wins. Convergence is declared when two
    successive estimates agree to relative tolerance tol.
    """
    mat = np.atleast_2d(np.asarray(a, dtype=float))
    for r in (r_x, r_y):
        if not (math.isfinite(r) and r > 1):
            raise ConfigurationError(f"Boyd exponents need 1 < r < inf, got {r}")
    if n_starts < 1:
        raise ConfigurationError(f"n_starts must be >= 1, got {n_starts}")
    if not np.any(mat):
        return NormEstimate(0.0, 0, True, [0.0])

    rng = make_rng(seed)
    best = None
    for start in range(n_starts):
        x0 = rng.uniform(0.5, 1.5, size=mat.shape[1])
        if start > 0:
            x0 *= rng.choice([-1.0, 1.0], size=mat.shape[1])
        est = _boyd_single(mat, x0, r_x, r_y, tol, max_iter)
        if best is None or est.value > best.value:
            best = est
    if best.converged:
        logger.debug("boyd l^%g -> l^%g: %.10g after %d sweeps", r_x, r_y, best.value, best.iterations)
    else:
        logger.warning("boyd l^%g -> l^%g hit max_iter=%d, last estimate %.10g", r_x, r_y, max_iter, best.value)
    return best


def block_norms(op: BlockOperator, r_x: float, r_y: Optional[float] = None, **kwargs) -> list[NormEstimate]:
    """Boyd estimate of every ||A_i||; L_max is the largest value."""
    r_y = op.output_space.r if r_y is None else r_y
    return [boyd_operator_norm(b, r_x, r_y, **kwargs) for b in op.blocks]


# ─── CSV I/O ──────────────────────────────────────────────────────────────────
def write_matrix_csv(path, a):
    try:
        np.savetxt(path, np.atleast_2d(np.asarray(a, dtype=float)), delimiter=",", fmt="%.17g")
    except OSError as exc:
        raise DataFileError(f"cannot write {path}: {exc}") from exc


def read_matrix_csv(path) -> np.ndarray:
    try:
        a = np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError as exc:
        raise DataFileError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataFileError(f"malformed matrix CSV {path}: {exc}") from exc
    if a.size == 0:
        raise DataFileError(f"matrix CSV {path} is empty")
    if not np.all(np.isfinite(a)):
        raise DataFileError(f"matrix CSV {path} contains NaN or Inf")
    return a
