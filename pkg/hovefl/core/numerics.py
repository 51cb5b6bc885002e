"""
Deterministic dense numerics shared by every other module.

Vectors and matrices are float64 numpy arrays. Reductions that feed results
files go through fixed-order kernels (`np.cumsum`, `np.einsum` without BLAS
dispatch) so outputs do not depend on the BLAS thread count.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
import numpy.typing as npt

from hovefl.utilities.errors import DimensionMismatchError, NonFiniteError

Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]

# stream ids for RngStream; one per consumer so draws never interleave
STREAM_DATA = 0
STREAM_SPLIT = 1
STREAM_PARTITION = 2
STREAM_INIT = 3
STREAM_TRAIN = 4
STREAM_PROBE = 5

DEFAULT_FD_STEP = 1e-5


def as_vector(values, what: str = "vector") -> Vector:
    """Copy `values` into a finite, 1-D float64 array."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{what} must have a positive dimension")
    ensure_finite(arr, what)
    return arr


def as_matrix(values, what: str = "matrix") -> Matrix:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{what} must be a non-empty 2-D array, got shape {arr.shape}")
    ensure_finite(arr, what)
    return arr


def ensure_finite(arr: np.ndarray, what: str = "value") -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(arr)))[0])
        raise NonFiniteError(f"{what} has a non-finite entry at flat index {bad}", coordinate=bad)


def dot(a: Vector, b: Vector) -> float:
    """Left-to-right sequential sum of elementwise products."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(a.size, b.size)
    if a.size == 0:
        return 0.0
    return float(np.cumsum(a * b)[-1])


def norm(a: Vector) -> float:
    return float(np.sqrt(dot(a, a)))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a fixed, single-threaded reduction order."""
    if a.shape[-1] != b.shape[0]:
        raise DimensionMismatchError(a.shape[-1], b.shape[0], what="inner")
    if b.ndim == 1:
        return np.einsum("ij,j->i", a, b, optimize=False)
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def matvec(a: Matrix, x: Vector) -> Vector:
    return matmul(a, x)


class RngStream:
    """
    Counter-based random stream keyed by (seed, stream_id, *path).

    Backed by numpy's Philox bit generator, so a key always yields the same draws
    on every platform, and distinct keys yield independent sequences. A stream is
    single-owner: derive children with `child` instead of sharing one between threads.
    """

    def __init__(self, seed: int, stream_id: int = 0, path: tuple[int, ...] = ()):
        if seed < 0 or stream_id < 0 or any(k < 0 for k in path):
            raise ValueError("seed, stream_id and path keys must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.path = tuple(int(k) for k in path)
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self.path))
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, *keys: int) -> RngStream:
        return RngStream(self.seed, self.stream_id, self.path + tuple(keys))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self.path})"


def gaussian(rng: RngStream, n: int) -> Vector:
    """Draw `n` standard-normal values, advancing the stream."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return rng.generator.standard_normal(n)


def finite_diff_gradient(
    f: Callable[[Vector], float], x: Vector, h: float = DEFAULT_FD_STEP
) -> Vector:
    """
    Central-difference gradient of a scalar function.

    Args:
        f: scalar function of a vector
        x: evaluation point
        h: step size, must be positive

    Returns:
        Vector: (f(x + h e_k) - f(x - h e_k)) / (2h) for every coordinate k

    Raises:
        NonFiniteError: if any evaluation of f is not finite (names the coordinate)
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    probe = x.copy()
    for k in range(x.size):
        probe[k] = x[k] + h
        forward = float(f(probe))
        probe[k] = x[k] - h
        backward = float(f(probe))
        probe[k] = x[k]
        if not (np.isfinite(forward) and np.isfinite(backward)):
            raise NonFiniteError(
                f"objective is not finite around coordinate {k}", coordinate=k
            )
        grad[k] = (forward - backward) / (2.0 * h)
    return grad
