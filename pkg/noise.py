"""
noise.py : seeded data corruption.

Three corruption models (Gaussian, random-valued impulse, salt-and-pepper)
plus the realised noise level delta = ||y_delta - y||_Y. All randomness in the
project comes from make_rng, a numpy Generator over the counter-based Philox
bit generator, so a seed means the same stream on every platform.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import ConfigurationError
from spaces import as_vector, lr_norm

logger = logging.getLogger(__name__)

# ─── CONSTANTS ────────────────────────────────────────────────────────────────
RNG_ALGORITHM = "numpy.random.Philox (Philox4x64-10)"
NOISE_KINDS = ("none", "gaussian", "impulse", "salt_pepper")
IMPULSE_LO = 0.1
IMPULSE_HI = 0.4
IMPULSE_HIGH_OFFSET = 1.4

BRANCH_KEEP = "keep"
BRANCH_LOW = "corrupt-low"
BRANCH_HIGH = "corrupt-high"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


# ─── NOISE SPEC ───────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class NoiseSpec:
    """Corruption model and its seed.

    gaussian uses sigma; impulse uses pct, lo, hi; salt_pepper uses pct and the
    optional salt/pepper values (defaults max(y) and 0 when left unset).
    """

    kind: str = "none"
    sigma: float = 0.0
    pct: float = 0.0
    lo: float = IMPULSE_LO
    hi: float = IMPULSE_HI
    salt_value: Optional[float] = None
    pepper_value: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ConfigurationError(f"noise sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.pct <= 1.0:
            raise ConfigurationError(f"corruption probability pct must lie in [0, 1], got {self.pct}")
        if not self.lo < self.hi:
            raise ConfigurationError(f"impulse bounds need lo < hi, got lo={self.lo}, hi={self.hi}")

    @property
    def is_exact(self) -> bool:
        if self.kind == "none":
            return True
        if self.kind == "gaussian":
            return self.sigma == 0.0
        return self.pct == 0.0


# ─── CORRUPTION MODELS ────────────────────────────────────────────────────────
def impulse_value(y_i: float, xi: float, branch: str) -> float:
    """Impulse rule: keep, (1-xi)y or 1.4 xi + (1-xi)y. Works entrywise on arrays."""
    if branch == BRANCH_KEEP:
        return y_i
    if branch == BRANCH_LOW:
        return (1.0 - xi) * y_i
    if branch == BRANCH_HIGH:
        return IMPULSE_HIGH_OFFSET * xi + (1.0 - xi) * y_i
    raise ConfigurationError(f"unknown impulse branch {branch!r}")


def _gaussian(y, spec, rng):
    return y + rng.normal(0.0, spec.sigma, size=y.shape)


def _impulse(y, spec, rng):
    # one uniform per entry decides corruption, a second one the branch
    hit = rng.random(y.shape) < spec.pct
    high = rng.random(y.shape) < 0.5
    xi = rng.uniform(spec.lo, spec.hi, size=y.shape)
    low_values = impulse_value(y, xi, BRANCH_LOW)
    high_values = impulse_value(y, xi, BRANCH_HIGH)
    return np.where(hit, np.where(high, high_values, low_values), y)


def _salt_pepper(y, spec, rng):
    salt = float(np.max(y)) if spec.salt_value is None else float(spec.salt_value)
    pepper = 0.0 if spec.pepper_value is None else float(spec.pepper_value)
    count = int(round(spec.pct * y.size))
    out = y.copy()
    if count == 0:
        return out
    picked = rng.choice(y.size, size=count, replace=False)
    is_salt = rng.random(count) < 0.5
    out[picked] = np.where(is_salt, salt, pepper)
    return out


_MODELS = {
    "gaussian": _gaussian,
    "impulse": _impulse,
    "salt_pepper": _salt_pepper,
}


def corrupt(y, spec: NoiseSpec, r_y: float = 2.0) -> tuple[np.ndarray, float]:
    """Return (y_delta, delta) with delta = ||y_delta - y||_{r_y} of the realised noise."""
    clean = as_vector(y, "y")
    if spec.is_exact:
        return clean.copy(), 0.0
    rng = make_rng(spec.seed)
    noisy = _MODELS[spec.kind](clean, spec, rng)
    delta = lr_norm(noisy - clean, r_y)
    logger.debug("noise %s (seed %d): delta=%.6g in l^%g", spec.kind, spec.seed, delta, r_y)
    return noisy, delta


def perturbation_direction(length: int, r_y: float, seed: int) -> np.ndarray:
    """Gaussian direction rescaled to unit l^{r_y} norm."""
    e = make_rng(seed).standard_normal(length)
    return e / lr_norm(e, r_y)
