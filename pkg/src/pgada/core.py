"""Dense numeric kernels, seeded sampling and a finite-difference oracle.

Matrices are plain ``float64`` numpy arrays; every function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DegeneratePlanError(DomainError):
    """A transport plan row carries no mass."""


class NumericError(FloatingPointError):
    """A computation produced a non-finite value."""


class UsageError(ValueError):
    """The caller asked for something the API does not support."""


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Two streams with the same key produce identical sequences no matter which
    thread or process draws from them, so parallel episode workers stay
    reproducible.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF,
                                     self.stream_id & 0xFFFFFFFFFFFFFFFF])
        return np.random.Generator(np.random.Philox(ss))

    def child(self, stream_id: int) -> "RngStream":
        # mix the parent id in so children of different parents do not collide
        return RngStream(self.seed, (self.stream_id * 1_000_003 + stream_id + 1) & 0xFFFFFFFFFFFFFFFF)


def pairwise_sq_dist(a, b) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``a`` and ``b``.

    Uses the expansion ``|a|^2 + |b|^2 - 2<a, b>``; round-off negatives are
    clamped to zero and exact duplicates get an exact zero.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    out = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    np.maximum(out, 0.0, out=out)
    if a is b or (a.shape == b.shape and np.array_equal(a, b)):
        np.fill_diagonal(out, 0.0)
    return out


def gaussian_sample(rng, mean: float, sigma: float, shape: tuple[int, int]) -> np.ndarray:
    """I.i.d. ``N(mean, sigma^2)`` matrix drawn from ``rng``.

    ``rng`` may be an :class:`RngStream` (a fresh generator is derived from
    its key) or an already-open ``numpy.random.Generator``.
    """
    if sigma < 0 or not np.isfinite(sigma):
        raise DomainError(f"sigma must be a finite non-negative number, got {sigma}")
    n, d = shape
    if sigma == 0:
        return np.full((n, d), float(mean))
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return mean + sigma * gen.standard_normal((n, d))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise DomainError("step h must be positive")
    x = np.array(x, dtype=np.float64, ndmin=1)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is not finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
