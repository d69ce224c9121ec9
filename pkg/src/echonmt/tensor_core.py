"""Minimal dense/sparse numerics: matrices, deterministic streams, spectral radius.

Everything is 64-bit floats. All randomness flows through `Rng`, a
counter-based splitmix64 generator keyed by (seed, stream_label), so any
tensor can be regenerated bit-exactly on any platform.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np
from numba import njit

# A Matrix is simply a 2-D float64 ndarray in row-major order.
Matrix = np.ndarray

_MASK64 = (1 << 64) - 1
_PHI = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


class Rng:
    """Deterministic counter-based stream generator.

    Output i of the stream is splitmix64's finalizer applied to
    stream_seed + i * phi, where the stream seed mixes the user seed with a
    hash of the stream label. Identical (seed, stream_label) pairs produce
    bit-identical sequences everywhere; distinct labels give independent
    streams. Single-owner mutable state: never share an instance between
    concurrent tasks.
    """

    def __init__(self, seed: int, stream_label: str):
        self.seed = int(seed) & _MASK64
        self.stream_label = stream_label
        self._stream_seed = np.uint64(
            _splitmix64(_splitmix64(self.seed) ^ _fnv1a64(stream_label.encode("utf-8")))
        )
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs as uint64."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        x = self._stream_seed + idx * _PHI
        z = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self, shape, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
        """I.i.d. uniform floats in [lo, hi)."""
        if not lo < hi:
            raise ValueError(f"uniform requires lo < hi, got lo={lo}, hi={hi}")
        n = int(np.prod(shape)) if not np.isscalar(shape) else int(shape)
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = lo + (hi - lo) * u
        return out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic uniform permutation of range(n)."""
        return np.argsort(self.raw(n), kind="stable")


@dataclass
class SparseMatrix:
    """Pruned matrix: mostly-nonzero dense storage with an explicit zero pattern.

    Stored densely (pruned entries are exact 0.0) since reservoir densities
    are 0.75-0.80; the entries/density accessors expose the sparse view.
    """

    rows: int
    cols: int
    dense: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.asarray(self.dense, dtype=np.float64)
        if d.shape != (self.rows, self.cols):
            raise ValueError(f"dense shape {d.shape} != ({self.rows}, {self.cols})")
        if not np.all(np.isfinite(d)):
            raise ValueError("SparseMatrix entries must be finite")
        self.dense = np.ascontiguousarray(d)

    @classmethod
    def from_entries(cls, rows: int, cols: int, entries) -> "SparseMatrix":
        dense = np.zeros((rows, cols))
        seen = set()
        for r, c, v in entries:
            if (r, c) in seen:
                raise ValueError(f"duplicate entry at ({r}, {c})")
            seen.add((r, c))
            dense[r, c] = v
        return cls(rows, cols, dense)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.dense))

    @property
    def density(self) -> float:
        return self.nnz / (self.rows * self.cols)

    @property
    def entries(self):
        rr, cc = np.nonzero(self.dense)
        return [(int(r), int(c), float(self.dense[r, c])) for r, c in zip(rr, cc)]

    def toarray(self) -> np.ndarray:
        return self.dense


@njit(cache=True)
def _matvec_rowmajor(m, v):
    out = np.empty(m.shape[0])
    for i in range(m.shape[0]):
        s = 0.0
        for j in range(m.shape[1]):
            s += m[i, j] * v[j]
        out[i] = s
    return out


def matvec(m: Union[Matrix, SparseMatrix], v: np.ndarray) -> np.ndarray:
    """Matrix-vector product with fixed row-major accumulation order.

    The summation order is pinned (left to right within each row) so repeated
    evaluation is bit-identical across runs and platforms.
    """
    dense = m.toarray() if isinstance(m, SparseMatrix) else np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if dense.ndim != 2 or v.ndim != 1 or dense.shape[1] != v.shape[0]:
        raise ValueError(
            f"matvec dimension mismatch: matrix shape {dense.shape}, vector shape {v.shape}"
        )
    return _matvec_rowmajor(np.ascontiguousarray(dense), np.ascontiguousarray(v))


class SpectralRadius(NamedTuple):
    value: float
    converged: bool


def spectral_radius(
    m: Union[Matrix, SparseMatrix], tol: float = 1e-6, max_iters: int = 1000
) -> SpectralRadius:
    """Dominant |eigenvalue| estimate by power iteration.

    Each iteration applies the matrix twice and fits the three latest iterates
    to the recurrence x_{k+2} = s x_{k+1} - p x_k, whose p converges to the
    squared radius even when the dominant eigenvalues are a complex-conjugate
    pair; when the iterates are collinear (real dominant eigenvalue) the plain
    one-step growth ratio is used instead. Converged when successive estimates
    differ by less than tol; otherwise the best estimate is returned with
    converged=False.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    dense = m.toarray() if isinstance(m, SparseMatrix) else np.asarray(m, dtype=np.float64)
    if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
        raise ValueError(f"spectral_radius requires a square matrix, got shape {dense.shape}")
    n = dense.shape[0]
    if not np.any(dense):
        return SpectralRadius(0.0, True)
    dense = np.ascontiguousarray(dense)

    v = Rng(0x5EED0F00D, "spectral-radius-start").uniform((n,))
    v = v / np.linalg.norm(v)
    est = 0.0
    est_prev = math.inf
    converged = False
    for _ in range(max_iters):
        w1 = _matvec_rowmajor(dense, v)
        n1 = np.linalg.norm(w1)
        if n1 == 0.0:
            return SpectralRadius(0.0, True)
        w2 = _matvec_rowmajor(dense, w1)
        a11 = float(w1 @ w1)
        a21 = float(v @ w1)
        r1 = float(w1 @ w2)
        r2 = float(v @ w2)
        # v is unit, so collinearity of v and w1 means a21^2 ~= a11.
        collinear = a11 == 0.0 or (1.0 - a21 * a21 / a11) < 1e-10
        if collinear:
            est = float(n1)
        else:
            det = -a11 + a21 * a21  # a11*a22 - a12*a21 with a22=-1, a12=-a21
            p = (a11 * r2 - a21 * r1) / det
            est = math.sqrt(p) if p > 0.0 else float(n1)
        n2 = np.linalg.norm(w2)
        if n2 == 0.0:
            return SpectralRadius(0.0, True)
        v = w2 / n2
        if abs(est - est_prev) < tol:
            converged = True
            break
        est_prev = est
    return SpectralRadius(float(est), converged)


def seeded_uniform(rng: Rng, rows: int, cols: int, lo: float, hi: float) -> Matrix:
    """Matrix of i.i.d. uniform [lo, hi) entries drawn from rng's stream."""
    if rows <= 0 or cols <= 0:
        raise ValueError(f"matrix dims must be positive, got {rows}x{cols}")
    return rng.uniform((rows, cols), lo, hi)
