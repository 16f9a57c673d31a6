"""
spaces.py : finite-dimensional l^r geometry.

Norms, duality maps J_p (the gradient of x -> ||x||_r^p / p), their inverses,
dual pairings and Bregman distances. Every function is pure.
"""

import math
from dataclasses import dataclass

import numpy as np

from errors import ConfigurationError, DimensionError, InvalidInputError


def conjugate_exponent(r: float) -> float:
    """Hölder conjugate r* = r / (r - 1)."""
    if not r > 1 or not math.isfinite(r):
        raise ConfigurationError(f"conjugate exponent needs 1 < r < inf, got {r}")
    return r / (r - 1.0)


# ─── SPACE DESCRIPTOR ───────────────────────────────────────────────────────
@dataclass(frozen=True)
class SpaceDescriptor:
    """Norm exponent r and duality power p of an l^r space.

    r in {1, inf} is rejected: those spaces are neither smooth nor strictly
    convex and their duality maps are set-valued.
    """

    r: float
    p: float

    def __post_init__(self):
        r, p = float(self.r), float(self.p)
        if not (math.isfinite(r) and r > 1.0):
            raise ConfigurationError(
                f"norm exponent r must satisfy 1 < r < inf (smooth, power-convex range); got r={self.r}"
            )
        if not (math.isfinite(p) and p > 1.0):
            raise ConfigurationError(f"duality power p must satisfy p > 1; got p={self.p}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "p", p)

    @property
    def r_conj(self) -> float:
        return conjugate_exponent(self.r)

    @property
    def p_conj(self) -> float:
        return conjugate_exponent(self.p)

    @property
    def dual(self) -> "SpaceDescriptor":
        return SpaceDescriptor(self.r_conj, self.p_conj)

    @property
    def is_hilbert(self) -> bool:
        return self.r == 2.0 and self.p == 2.0

    @classmethod
    def hilbert(cls) -> "SpaceDescriptor":
        return cls(2.0, 2.0)

    def __str__(self):
        return f"l^{self.r:g} (p={self.p:g})"


# ─── HELPERS ──────────────────────────────────────────────────────────────────
def as_vector(x, name: str = "x") -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        v = v.reshape(-1)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains NaN or Inf entries")
    return v


def _check_same_length(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


# ─── NORMS ─────────────────────────────────────────────────────────────────────
def lr_norm(x, r: float) -> float:
    """(sum |x_j|^r)^(1/r), evaluated on x / max|x| to stay clear of under/overflow."""
    if not r > 1:
        raise ConfigurationError(f"norm exponent must be > 1, got {r}")
    v = np.abs(as_vector(x))
    scale = v.max(initial=0.0)
    if scale == 0.0:
        return 0.0
    if r == 2.0:
        return float(scale * np.sqrt(np.sum((v / scale) ** 2)))
    return float(scale * np.sum((v / scale) ** r) ** (1.0 / r))


def norm_power(x, desc: SpaceDescriptor) -> float:
    """||x||_r^p."""
    return lr_norm(x, desc.r) ** desc.p


# ─── DUALITY MAPS ──────────────────────────────────────────────────────────
def duality_map(x, desc: SpaceDescriptor) -> np.ndarray:
    """J_p(x)_j = ||x||_r^(p-r) |x_j|^(r-1) sign(x_j); J_p(0) = 0."""
    v = as_vector(x)
    norm = lr_norm(v, desc.r)
    if norm == 0.0:
        return np.zeros_like(v)
    factor = math.exp((desc.p - desc.r) * math.log(norm))
    if desc.r == 2.0:
        return factor * v
    return factor * np.abs(v) ** (desc.r - 1.0) * np.sign(v)


def inverse_duality_map(xs, desc: SpaceDescriptor) -> np.ndarray:
    """J_p^{-1} = J_{p*} of the dual space (r*, p*)."""
    return duality_map(xs, desc.dual)


def dual_pairing(xs, x) -> float:
    a = as_vector(xs, "xs")
    b = as_vector(x)
    _check_same_length(a, b)
    return float(np.dot(a, b))


# ─── BREGMAN DISTANCES ────────────────────────────────────────────────────────
def bregman_distance(z, w, desc: SpaceDescriptor) -> float:
    """D(z, w) = ||z||^p / p* + ||w||^p / p - <J_p(z), w>."""
    zv = as_vector(z, "z")
    wv = as_vector(w, "w")
    _check_same_length(zv, wv)
    jz = duality_map(zv, desc)
    return (
        norm_power(zv, desc) / desc.p_conj
        + norm_power(wv, desc) / desc.p
        - float(np.dot(jz, wv))
    )


def dual_bregman_distance(zs, ws, desc: SpaceDescriptor) -> float:
    """Bregman distance of the dual space; D(z, w) = D*(J_p(w), J_p(z))."""
    return bregman_distance(zs, ws, desc.dual)
