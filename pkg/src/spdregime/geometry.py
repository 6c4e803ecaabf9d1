"""Symmetric / SPD matrix types and Riemannian geometry primitives.

All heavy lifting is routed through one cyclic-Jacobi eigensolver so results
are bitwise reproducible for identical inputs.  The wrapper types validate
their invariants at construction; the ndarray helpers prefixed with an
underscore skip re-validation and are the hot path used by the layer and
model code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DataError, DomainError, EigFailure, MeanFailure, ShapeError

EXP_CAP = 700.0  # exp overflows float64 just above 709
DEFAULT_SPD_TOLERANCE = 1e-10
_REPAIR_FLOOR = -1e-10


def _as_square(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 1:
        raise ShapeError("matrix dimension must be >= 1")
    if not np.all(np.isfinite(a)):
        raise DomainError("matrix contains non-finite entries")
    return a


def sym(a: np.ndarray) -> np.ndarray:
    """Exact symmetrization (IEEE addition is commutative)."""
    return 0.5 * (a + a.T)


class SymMatrix:
    """Immutable real symmetric matrix.

    Construction symmetrizes the input, so ``entries[i, j] == entries[j, i]``
    holds exactly.
    """

    __slots__ = ("_values",)

    def __init__(self, values):
        a = sym(_as_square(values))
        a.setflags(write=False)
        self._values = a

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dim(self) -> int:
        return self._values.shape[0]

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self._values.astype(dtype)
        return self._values

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"

    def __eq__(self, other):
        return isinstance(other, SymMatrix) and np.array_equal(
            self._values, other._values
        )


class SPDMatrix(SymMatrix):
    """Symmetric positive definite matrix with a validated spectrum.

    A smallest eigenvalue in ``(-1e-10, spd_tolerance]`` is treated as
    round-off from an at-worst-semidefinite source and repaired by adding
    ``(spd_tolerance - lambda_min) * I``; the ``repaired`` flag records
    that this happened.  Anything below that band is rejected.
    """

    __slots__ = ("spd_tolerance", "repaired")

    def __init__(self, values, spd_tolerance: float = DEFAULT_SPD_TOLERANCE):
        a = sym(_as_square(values))
        w = _eigvalsh(a)
        lam_min = w[-1]
        repaired = False
        if lam_min <= spd_tolerance:
            if lam_min <= _REPAIR_FLOOR:
                raise DomainError(
                    f"matrix is not positive definite (lambda_min={lam_min:.3e})"
                )
            a = a + (spd_tolerance - lam_min) * np.eye(a.shape[0])
            repaired = True
        a.setflags(write=False)
        self._values = a
        self.spd_tolerance = spd_tolerance
        self.repaired = repaired

    @classmethod
    def _trusted(cls, values: np.ndarray, spd_tolerance: float = DEFAULT_SPD_TOLERANCE):
        """Wrap a matrix that is SPD by construction, skipping the eig check."""
        obj = cls.__new__(cls)
        a = sym(np.asarray(values, dtype=np.float64))
        a.setflags(write=False)
        obj._values = a
        obj.spd_tolerance = spd_tolerance
        obj.repaired = False
        return obj


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues (descending) and orthonormal eigenvector columns."""

    eigvals: np.ndarray
    eigvecs: np.ndarray


def _eigh(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Jacobi eigendecomposition of an ndarray assumed symmetric."""
    w, v, sweeps = _kernels.jacobi_eigh(
        a, _kernels.JACOBI_TOL, _kernels.JACOBI_MAX_SWEEPS
    )
    if sweeps < 0:
        raise EigFailure(
            f"Jacobi sweeps exhausted ({_kernels.JACOBI_MAX_SWEEPS})",
            iterations=_kernels.JACOBI_MAX_SWEEPS,
        )
    return w, v


def _eigvalsh(a: np.ndarray) -> np.ndarray:
    return _eigh(a)[0]


def sym_eig(s) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix.

    Deterministic for identical input: cyclic rotation order, descending
    eigenvalues, and the largest-magnitude component of every eigenvector
    made positive.
    """
    a = sym(_as_square(np.asarray(s)))
    w, v = _eigh(a)
    w.setflags(write=False)
    v.setflags(write=False)
    return EigenDecomposition(eigvals=w, eigvecs=v)


def _eig_fn(a: np.ndarray, code: int) -> np.ndarray:
    out, status = _kernels._eig_fn(a, code)
    if status == 1:
        raise EigFailure("Jacobi sweeps exhausted", iterations=_kernels.JACOBI_MAX_SWEEPS)
    if status == 2:
        raise DomainError("matrix has a non-positive eigenvalue")
    return out


def _logm(a: np.ndarray) -> np.ndarray:
    return _eig_fn(a, 0)


def _expm(a: np.ndarray) -> np.ndarray:
    w = _eigvalsh(a)
    if w[0] > EXP_CAP:
        raise OverflowError(f"matrix exponential overflow (lambda_max={w[0]:.3e})")
    return _eig_fn(a, 1)


def _sqrtm(a: np.ndarray) -> np.ndarray:
    return _eig_fn(a, 2)


def _invsqrtm(a: np.ndarray) -> np.ndarray:
    return _eig_fn(a, 3)


def spd_log(x) -> SymMatrix:
    """Matrix logarithm of an SPD matrix (tangent map at the identity)."""
    a = np.asarray(x, dtype=np.float64)
    return SymMatrix(_logm(sym(a)))


def spd_exp(s) -> SPDMatrix:
    """Matrix exponential of a symmetric matrix; always SPD."""
    a = sym(np.asarray(s, dtype=np.float64))
    return SPDMatrix._trusted(_expm(a))


def affine_distance(x, y) -> float:
    """Affine-invariant Riemannian distance ||log(X^-1/2 Y X^-1/2)||_F."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return _affine_distance(a, b)


def _affine_distance(a: np.ndarray, b: np.ndarray) -> float:
    p = _invsqrtm(a)
    m = sym(p @ b @ p)
    w = _eigvalsh(m)
    if w[-1] <= 0.0:
        raise DomainError("second operand is not SPD relative to the first")
    return float(np.sqrt(np.sum(np.log(w) ** 2)))


def _affine_geodesic(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Point at parameter t on the affine-invariant geodesic from a to b."""
    gs = _sqrtm(a)
    gis = _invsqrtm(a)
    m = sym(gis @ b @ gis)
    w, v = _eigh(m)
    if w[-1] <= 0.0:
        raise DomainError("geodesic endpoints must both be SPD")
    mt = (v * (w**t)) @ v.T
    return sym(gs @ mt @ gs)


def affine_geodesic(a, b, t: float) -> SPDMatrix:
    return SPDMatrix._trusted(
        _affine_geodesic(np.asarray(a, np.float64), np.asarray(b, np.float64), t)
    )


def _log_euclidean_geodesic(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    return _expm((1.0 - t) * _logm(a) + t * _logm(b))


def log_euclidean_geodesic(a, b, t: float) -> SPDMatrix:
    return SPDMatrix._trusted(
        _log_euclidean_geodesic(np.asarray(a, np.float64), np.asarray(b, np.float64), t)
    )


def log_euclidean_distance(a, b) -> float:
    """||log A - log B||_F."""
    la = _logm(sym(np.asarray(a, np.float64)))
    lb = _logm(sym(np.asarray(b, np.float64)))
    return float(np.linalg.norm(la - lb))


def karcher_mean(
    batch, max_iter: int = 50, tol: float = 1e-8, init: str = "arithmetic"
) -> SPDMatrix:
    """Karcher (Frechet) mean of a non-empty batch of SPD matrices.

    ``init`` selects the start point of the fixed-point iteration:
    ``"arithmetic"`` (the default) or ``"log_euclidean"``, which converges
    to the same mean in fewer iterations and is what the batchnorm layer
    uses on its hot path.
    """
    if init not in ("arithmetic", "log_euclidean"):
        raise DomainError(f"unknown karcher_mean init {init!r}")
    mats = [np.asarray(x, dtype=np.float64) for x in batch]
    if not mats:
        raise DataError("karcher_mean requires a non-empty batch")
    dim = mats[0].shape[0]
    for m in mats:
        if m.shape != (dim, dim):
            raise ShapeError("karcher_mean requires a uniform-dimension batch")
    xs = np.stack(mats)
    g, iters, resid, status = _kernels.karcher_mean_core(
        xs, max_iter, tol, init == "log_euclidean"
    )
    if status == 1:
        raise EigFailure("Jacobi sweeps exhausted", iterations=_kernels.JACOBI_MAX_SWEEPS)
    if status == 2:
        raise DomainError("karcher_mean requires SPD inputs")
    if status == 3:
        raise MeanFailure(
            f"Karcher mean did not converge in {max_iter} iterations "
            f"(residual={resid:.3e})",
            residual=float(resid),
        )
    return SPDMatrix._trusted(g)


def transport_center(x, g) -> SPDMatrix:
    """Congruence transport G^-1/2 X G^-1/2 (centers X at G)."""
    a = np.asarray(x, np.float64)
    gm = np.asarray(g, np.float64)
    if a.shape != gm.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {gm.shape}")
    if _eigvalsh(sym(gm))[-1] <= 0.0:
        raise DomainError("transport_center requires an SPD center")
    p = _invsqrtm(sym(gm))
    return SPDMatrix._trusted(sym(p @ a @ p))


def transport_bias(x, b) -> SPDMatrix:
    """Congruence transport B^1/2 X B^1/2 (re-biases X toward B)."""
    a = np.asarray(x, np.float64)
    bm = np.asarray(b, np.float64)
    if a.shape != bm.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {bm.shape}")
    if _eigvalsh(sym(bm))[-1] <= 0.0:
        raise DomainError("transport_bias requires an SPD bias")
    q = _sqrtm(sym(bm))
    return SPDMatrix._trusted(sym(q @ a @ q))


def corr_distance(c) -> SymMatrix:
    """Elementwise correlation distance sqrt(2 (1 - c)) with zero diagonal."""
    a = sym(_as_square(np.asarray(c)))
    if np.any(a > 1.0 + 1e-12) or np.any(a < -1.0 - 1e-12):
        worst = float(np.max(np.abs(a)))
        raise DomainError(
            f"correlation entries must lie in [-1, 1] (worst magnitude {worst:.6g})"
        )
    clipped = np.clip(a, -1.0, 1.0)
    d = np.sqrt(2.0 * (1.0 - clipped))
    np.fill_diagonal(d, 0.0)
    return SymMatrix(d)
