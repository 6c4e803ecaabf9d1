"""Differentiable SPD network layers with exact analytic backward passes.

Layers operate on plain ``(n, n)`` or stacked ``(B, n, n)`` float64 arrays;
the thin ``*_forward`` / ``*_backward`` functions at the bottom expose the
same operations on the validated wrapper types.  Gradients follow the
``dL = <G, dX>`` Frobenius pairing throughout, and every backward pass here
is finite-difference checked in the test suite (including degenerate
spectra).

No autodiff framework is involved: eigenvalue-function layers use the
Daleckii-Krein divided-difference kernel, which is the closed form of the
Jacobian of ``X = U diag(s) U^T  ->  U diag(f(s)) U^T`` for symmetric
perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, RetractionError, ShapeError
from .geometry import SPDMatrix, SymMatrix, _eigh, _invsqrtm, sym

# Eigenvalue pairs closer than this (relative) use the derivative limit of
# the divided difference.
DEGENERATE_RTOL = 1e-10
DEFAULT_REEIG_EPS = 1e-4


def batch_triple_sum(a_stack: np.ndarray, m: np.ndarray, b_stack: np.ndarray):
    """sum_b a_b @ m @ b_b as two BLAS contractions."""
    tmp = a_stack @ m
    return np.tensordot(tmp, b_stack, axes=([0, 2], [0, 1]))


@dataclass
class LayerGradients:
    """Gradients produced by one layer backward pass."""

    input_grad: np.ndarray
    param_grads: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Divided-difference (Daleckii-Krein) machinery for eigenvalue functions
# ---------------------------------------------------------------------------


def _dk_kernel(w: np.ndarray, fw: np.ndarray, fpw: np.ndarray) -> np.ndarray:
    """K[i, j] = (f(w_i) - f(w_j)) / (w_i - w_j), with the derivative of f at
    the midpoint on (near-)degenerate pairs and f'(w_i) on the diagonal."""
    dw = w[:, None] - w[None, :]
    scale = np.maximum(1.0, np.maximum(np.abs(w)[:, None], np.abs(w)[None, :]))
    near = np.abs(dw) < DEGENERATE_RTOL * scale
    mid = 0.5 * (fpw[:, None] + fpw[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        quot = (fw[:, None] - fw[None, :]) / np.where(near, 1.0, dw)
    return np.where(near, mid, quot)


def _modeig_forward(x: np.ndarray, fn, fn_deriv):
    w, v = _eigh(x)
    fw = fn(w)
    fpw = fn_deriv(w)
    y = sym((v * fw) @ v.T)
    return y, (w, v, fw, fpw)


def _modeig_backward(cache, grad: np.ndarray) -> np.ndarray:
    w, v, fw, fpw = cache
    k = _dk_kernel(w, fw, fpw)
    m = v.T @ sym(grad) @ v
    return sym(v @ (k * m) @ v.T)


def _log_fn(w):
    if w[-1] <= 0.0:
        raise DomainError("log-eigenvalue layer requires a strictly SPD input")
    return np.log(w)


def _log_deriv(w):
    return 1.0 / w


def _exp_fn(w):
    return np.exp(w)


# midpoint derivative of exp(w/2), used for the RBN bias parameterization
def _exp_half_fn(w):
    return np.exp(0.5 * w)


def _exp_half_deriv(w):
    return 0.5 * np.exp(0.5 * w)


# ---------------------------------------------------------------------------
# BiMap
# ---------------------------------------------------------------------------


class BiMapLayer:
    """Bilinear map X -> W^T X W with orthonormal-column weight."""

    def __init__(self, weight: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[0] <= weight.shape[1]:
            raise ShapeError("BiMap weight must be d_in x d_out with d_in > d_out")
        self.weight = weight

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "BiMapLayer":
        g = rng.standard_normal((d_in, d_out))
        return cls(qf_retraction(g))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ShapeError(
                f"BiMap expects dim {self.d_in}, got {x.shape[-1]}"
            )
        return self.weight.T @ x @ self.weight

    def backward(self, x: np.ndarray, grad: np.ndarray):
        """Returns (input_grad, euclidean_weight_grad); batched inputs sum
        the weight gradient over the batch."""
        if grad.shape[-1] != self.d_out:
            raise ShapeError(
                f"BiMap upstream grad expects dim {self.d_out}, got {grad.shape[-1]}"
            )
        w = self.weight
        input_grad = w @ grad @ w.T
        if x.ndim == 3:
            weight_grad = 2.0 * batch_triple_sum(x, w, grad)
        else:
            weight_grad = 2.0 * (x @ w @ grad)
        return input_grad, weight_grad


# ---------------------------------------------------------------------------
# ReEig / LogEig
# ---------------------------------------------------------------------------


class ReEigLayer:
    """Eigenvalue rectification U max(S, eps) U^T, the SPD analogue of ReLU."""

    def __init__(self, epsilon: float = DEFAULT_REEIG_EPS):
        if epsilon <= 0.0:
            raise DomainError("ReEig epsilon must be > 0")
        self.epsilon = float(epsilon)

    def _fn(self, w):
        return np.maximum(w, self.epsilon)

    def _fn_deriv(self, w):
        return (w > self.epsilon).astype(np.float64)

    def forward(self, x: np.ndarray):
        return _modeig_forward(x, self._fn, self._fn_deriv)

    def forward_batch(self, xs: np.ndarray):
        ys = np.empty_like(xs)
        caches = []
        for b in range(xs.shape[0]):
            ys[b], cache = self.forward(xs[b])
            caches.append(cache)
        return ys, caches

    @staticmethod
    def backward(cache, grad: np.ndarray) -> np.ndarray:
        return _modeig_backward(cache, grad)


def logeig_forward_raw(x: np.ndarray):
    return _modeig_forward(x, _log_fn, _log_deriv)


def logeig_backward_raw(cache, grad: np.ndarray) -> np.ndarray:
    return _modeig_backward(cache, grad)


def expeig_forward_raw(x: np.ndarray):
    return _modeig_forward(x, _exp_fn, _exp_fn)


def expeig_backward_raw(cache, grad: np.ndarray) -> np.ndarray:
    return _modeig_backward(cache, grad)


# ---------------------------------------------------------------------------
# Riemannian batch normalization
# ---------------------------------------------------------------------------


class RBNLayer:
    """Riemannian batchnorm: center a batch at its Karcher mean, re-bias
    toward a learned SPD parameter.

    The bias is parameterized as ``exp(bias_sym)`` for a free symmetric
    matrix, so plain Euclidean updates keep it SPD.  The batch mean is
    treated as a constant in the backward pass (stop-gradient convention);
    the finite-difference tests freeze the statistics the same way.
    """

    def __init__(
        self,
        dim: int,
        running_momentum: float = 0.9,
        karcher_max_iter: int = 50,
        karcher_tol: float = 1e-8,
    ):
        if not 0.0 < running_momentum < 1.0:
            raise DomainError("running_momentum must lie in (0, 1)")
        self.dim = dim
        self.running_momentum = float(running_momentum)
        self.karcher_max_iter = karcher_max_iter
        self.karcher_tol = karcher_tol
        self.bias_sym = np.zeros((dim, dim))
        self.running_mean = np.eye(dim)

    def _batch_mean(self, xs: np.ndarray) -> np.ndarray:
        from .geometry import karcher_mean

        return karcher_mean(
            xs,
            max_iter=self.karcher_max_iter,
            tol=self.karcher_tol,
            init="log_euclidean",
        ).values

    def forward_batch(self, xs: np.ndarray, training: bool):
        from .geometry import _affine_geodesic

        if training:
            g = self._batch_mean(xs)
            self.running_mean = _affine_geodesic(
                self.running_mean, g, 1.0 - self.running_momentum
            )
        else:
            g = self.running_mean
        return self._transform(xs, g)

    def _transform(self, xs: np.ndarray, g: np.ndarray):
        p = _invsqrtm(g)
        bw, bv = _eigh(sym(self.bias_sym))
        q = sym((bv * _exp_half_fn(bw)) @ bv.T)  # q = exp(bias_sym / 2)
        centered = p @ xs @ p
        ys = q @ centered @ q
        cache = (p, q, centered, bw, bv)
        return sym_batch(ys), cache

    def backward_batch(self, cache, grads: np.ndarray):
        p, q, centered, bw, bv = cache
        gsym = sym_batch(grads)
        pq = p @ q
        input_grads = pq @ gsym @ pq.T
        # dL/dq for y_i = q c_i q, then through q = exp(bias_sym / 2)
        dq = batch_triple_sum(gsym, q, centered)
        dq = dq + dq.T
        k = _dk_kernel(bw, _exp_half_fn(bw), _exp_half_deriv(bw))
        bias_grad = sym(bv @ (k * (bv.T @ dq @ bv)) @ bv.T)
        return sym_batch(input_grads), bias_grad


def sym_batch(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


# ---------------------------------------------------------------------------
# Stiefel optimizer step
# ---------------------------------------------------------------------------


def qf_retraction(a: np.ndarray) -> np.ndarray:
    """QR retraction: the Q factor with the R diagonal made positive."""
    q, r = np.linalg.qr(a)
    d = np.diag(r)
    scale = np.max(np.abs(d)) if d.size else 0.0
    if scale == 0.0 or np.any(np.abs(d) < 1e-13 * scale):
        raise RetractionError("rank-deficient matrix in QR retraction")
    return q * np.sign(d)


def tangent_project(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Project an ambient gradient onto the Stiefel tangent space at w."""
    return g - w @ sym(w.T @ g)


def stiefel_step(
    weight: np.ndarray,
    euclid_grad: np.ndarray,
    momentum_state: np.ndarray | None,
    lr: float,
    momentum: float,
):
    """One Riemannian SGD step on the Stiefel manifold.

    Projects the Euclidean gradient to the tangent space, folds it into the
    momentum buffer, retracts with QR, and re-projects the buffer onto the
    tangent space at the new point.
    """
    if momentum_state is None:
        momentum_state = np.zeros_like(weight)
    t = tangent_project(weight, euclid_grad)
    m = momentum * momentum_state + t
    new_weight = qf_retraction(weight - lr * m)
    new_state = tangent_project(new_weight, m)
    return new_weight, new_state


# ---------------------------------------------------------------------------
# Tangent-space flattening for the classifier
# ---------------------------------------------------------------------------


def tri_flatten(s: np.ndarray) -> np.ndarray:
    """Upper-triangular flattening with sqrt(2) off-diagonal scaling, so the
    Euclidean inner product of two flattenings equals <A, B>_F."""
    n = s.shape[-1]
    iu, ju = np.triu_indices(n)
    scale = np.where(iu == ju, 1.0, np.sqrt(2.0))
    return s[..., iu, ju] * scale


def tri_unflatten_grad(v: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of tri_flatten: maps a flattened gradient back to the
    symmetric-matrix gradient in the <G, dX> convention."""
    iu, ju = np.triu_indices(n)
    out = np.zeros(v.shape[:-1] + (n, n))
    half = np.where(iu == ju, 1.0, np.sqrt(2.0) / 2.0)
    out[..., iu, ju] = v * half
    out[..., ju, iu] = out[..., iu, ju]
    return out


def tri_dim(n: int) -> int:
    return n * (n + 1) // 2


# ---------------------------------------------------------------------------
# Validated-type surfaces
# ---------------------------------------------------------------------------


def bimap_forward(layer: BiMapLayer, x) -> SPDMatrix:
    return SPDMatrix._trusted(sym(layer.forward(np.asarray(x, np.float64))))


def bimap_backward(layer: BiMapLayer, x, upstream_grad) -> LayerGradients:
    ig, wg = layer.backward(
        np.asarray(x, np.float64), sym(np.asarray(upstream_grad, np.float64))
    )
    return LayerGradients(input_grad=sym(ig), param_grads={"weight": wg})


def reeig_forward(layer: ReEigLayer, x) -> SPDMatrix:
    y, _ = layer.forward(sym(np.asarray(x, np.float64)))
    return SPDMatrix._trusted(y)


def reeig_backward(layer: ReEigLayer, x, upstream_grad) -> LayerGradients:
    _, cache = layer.forward(sym(np.asarray(x, np.float64)))
    ig = layer.backward(cache, np.asarray(upstream_grad, np.float64))
    return LayerGradients(input_grad=ig)


def logeig_forward(x) -> SymMatrix:
    y, _ = logeig_forward_raw(sym(np.asarray(x, np.float64)))
    return SymMatrix(y)


def logeig_backward(x, upstream_grad) -> LayerGradients:
    _, cache = logeig_forward_raw(sym(np.asarray(x, np.float64)))
    ig = logeig_backward_raw(cache, np.asarray(upstream_grad, np.float64))
    return LayerGradients(input_grad=ig)


def rbn_forward(layer: RBNLayer, batch, training: bool) -> list[SPDMatrix]:
    xs = np.stack([np.asarray(x, np.float64) for x in batch])
    ys, _ = layer.forward_batch(xs, training)
    return [SPDMatrix._trusted(y) for y in ys]


def rbn_backward(layer: RBNLayer, batch, upstream_grads) -> LayerGradients:
    xs = np.stack([np.asarray(x, np.float64) for x in batch])
    _, cache = layer._transform(xs, layer._batch_mean(xs))
    gs = np.stack([np.asarray(g, np.float64) for g in upstream_grads])
    input_grads, bias_grad = layer.backward_batch(cache, gs)
    return LayerGradients(input_grad=input_grads, param_grads={"bias_sym": bias_grad})
