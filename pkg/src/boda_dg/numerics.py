"""Dense linear algebra, seeded random streams and finite differences.

Everything here works in float64. The random stream is Philox4x64-10 keyed
directly by the 64-bit seed with the counter starting at zero; a uniform draw
consumes one 64-bit output word ``r`` and returns ``(r >> 11) * 2**-53``, and
a standard-normal draw consumes two uniforms ``u1, u2`` and returns
``sqrt(-2 log(1 - u1)) * cos(2 pi u2)``. That definition is frozen: changing
it changes every generated dataset, split and initialisation.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_solve

from .errors import DimensionMismatch, NonFiniteValue, NotPositiveDefinite

_U64_MASK = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 2.0**-53


# ---------------------------------------------------------------------------
# Cholesky


def cholesky_factor(A: ArrayLike, sym_tol: float = 1e-9) -> NDArray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises NotPositiveDefinite when a pivot is not strictly positive, which
    callers use as the signal to add more ridge.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteValue("matrix has non-finite entries")
    if A.size and np.max(np.abs(A - A.T)) > sym_tol * max(1.0, np.max(np.abs(A))):
        raise DimensionMismatch("matrix is not symmetric")
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(L) > 0.0):
        raise NotPositiveDefinite("non-positive pivot")
    return L


def cholesky_solve(A: ArrayLike, b: ArrayLike) -> NDArray:
    """Solve ``A x = b`` for symmetric positive-definite ``A``."""
    L = cholesky_factor(A)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != L.shape[0]:
        raise DimensionMismatch(f"rhs has length {b.shape[0]}, matrix is {L.shape}")
    return cho_solve((L, True), b)


def solve_with_factor(L: NDArray, b: ArrayLike) -> NDArray:
    """Solve with a precomputed lower factor; ``b`` may hold several columns."""
    return cho_solve((L, True), np.asarray(b, dtype=np.float64))


# ---------------------------------------------------------------------------
# Finite differences


def finite_difference_gradient(
    f: Callable[[NDArray], float], x: ArrayLike, h: float = 1e-5
) -> NDArray:
    """Central-difference gradient of a scalar function.

    ``x`` may have any shape; the result has the same shape. ``x`` itself is
    left untouched.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteValue(f"non-finite probe at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------------------
# Random streams


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministically mix ``seed`` with integer tags into a new 64-bit seed."""
    if not tags:
        return int(seed) & _U64_MASK
    ss = np.random.SeedSequence([int(seed) & _U64_MASK, *(int(t) & _U64_MASK for t in tags)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class RngStream:
    """Counter-based random stream (see module docstring for the exact recipe).

    Not safe to share between concurrent consumers; derive a child stream per
    task with :meth:`child` instead.
    """

    def __init__(self, seed: int, *tags: int):
        self.seed = derive_seed(seed, *tags)
        self._bitgen = np.random.Philox(key=self.seed)
        self.draws = 0

    def child(self, *tags: int) -> "RngStream":
        return RngStream(self.seed, *tags)

    def _raw(self, n: int) -> NDArray:
        self.draws += n
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, size=None) -> NDArray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None) -> NDArray | float:
        n = 1 if size is None else int(np.prod(size))
        u = self.uniform(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(_TWO_PI * u[:, 1])
        return float(z[0]) if size is None else z.reshape(size)

    def uniform_range(self, lo: float, hi: float, size=None):
        return lo + (hi - lo) * self.uniform(size)

    def integers(self, high: int, size=None):
        """Uniform integers in ``[0, high)``."""
        u = self.uniform(size)
        k = np.floor(np.asarray(u) * high).astype(np.int64)
        k = np.minimum(k, high - 1)
        return int(k) if size is None else k

    def permutation(self, n: int) -> NDArray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def rng_next(stream: RngStream, distribution: str = "uniform") -> float:
    if distribution == "uniform":
        return stream.uniform()
    if distribution in ("normal", "standard-normal"):
        return stream.normal()
    raise ValueError(f"unknown distribution {distribution!r}")
