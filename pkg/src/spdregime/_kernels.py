"""Numba-compiled numerical kernels.

Everything here operates on plain float64 ndarrays and returns status codes
instead of raising, so the hot loops stay inside compiled code.  The public
wrappers in :mod:`spdregime.geometry` translate status codes into exceptions.
"""

import numpy as np
from numba import njit

# Relative off-diagonal Frobenius threshold at which a sweep stops.
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


@njit(cache=True)
def _jacobi_sweeps(a, v, rel_tol, max_sweeps, norm):
    """Cyclic Jacobi sweeps on a symmetric matrix in place, accumulating
    rotations into v.  Returns the sweep count or -1 on non-convergence."""
    n = a.shape[0]
    thresh = rel_tol * norm
    # Rotations this small cannot lift the off-diagonal norm above thresh.
    skip = thresh / (10.0 * n)
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                off += 2.0 * a[i, j] * a[i, j]
        if np.sqrt(off) <= thresh:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    if k != p and k != q:
                        akp = a[k, p]
                        akq = a[k, q]
                        a[k, p] = c * akp - s * akq
                        a[p, k] = a[k, p]
                        a[k, q] = c * akq + s * akp
                        a[q, k] = a[k, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = c * vkq + s * vkp
    return -1


@njit(cache=True)
def _sort_and_sign(a, v, sweeps):
    """Extract eigenvalues, sort descending, fix eigenvector signs so the
    first largest-magnitude component of each column is positive."""
    n = a.shape[0]
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    order = np.argsort(-w)
    w = w[order].copy()
    v = v[:, order].copy()
    for j in range(n):
        best = 0
        bestval = abs(v[0, j])
        for i in range(1, n):
            ai = abs(v[i, j])
            if ai > bestval:
                bestval = ai
                best = i
        if v[best, j] < 0.0:
            for i in range(n):
                v[i, j] = -v[i, j]
    return w, v, sweeps


@njit(cache=True)
def jacobi_eigh(a_in, rel_tol, max_sweeps):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Rotations follow a fixed (p, q) row order, so results are bitwise
    reproducible for identical input.  Returns (eigvals descending,
    eigvec columns sign-fixed, sweeps; sweeps is -1 on non-convergence).
    """
    n = a_in.shape[0]
    a = a_in.copy()
    v = np.eye(n)
    if n == 1:
        w = np.empty(1)
        w[0] = a[0, 0]
        return w, v, 0
    norm = 0.0
    for i in range(n):
        for j in range(n):
            norm += a[i, j] * a[i, j]
    norm = np.sqrt(norm)
    if norm == 0.0:
        return np.zeros(n), v, 0
    sweeps = _jacobi_sweeps(a, v, rel_tol, max_sweeps, norm)
    return _sort_and_sign(a, v, sweeps)


@njit(cache=True)
def jacobi_eigh_warm(a_in, v0, rel_tol, max_sweeps):
    """Jacobi eigendecomposition warm-started from an approximate
    eigenbasis: the input is pre-rotated into that basis, which leaves a
    near-diagonal matrix needing only a couple of sweeps."""
    n = a_in.shape[0]
    a = np.dot(v0.T, np.dot(a_in, v0))
    a = 0.5 * (a + a.T)
    v = v0.copy()
    norm = 0.0
    for i in range(n):
        for j in range(n):
            norm += a[i, j] * a[i, j]
    norm = np.sqrt(norm)
    if norm == 0.0:
        return np.zeros(n), v, 0
    sweeps = _jacobi_sweeps(a, v, rel_tol, max_sweeps, norm)
    return _sort_and_sign(a, v, sweeps)


@njit(cache=True)
def _sym(a):
    return 0.5 * (a + a.T)


@njit(cache=True)
def _eig_fn(a, code):
    """Apply log (code 0), exp (code 1), sqrt (code 2) or inv-sqrt (code 3)
    to the spectrum of a symmetric matrix.  Status 1 flags an eigensolver
    failure, 2 a domain violation (non-positive eigenvalue where one is
    required)."""
    w, v, sweeps = jacobi_eigh(a, JACOBI_TOL, JACOBI_MAX_SWEEPS)
    n = a.shape[0]
    out = np.empty_like(a)
    if sweeps < 0:
        return out, 1
    fw = np.empty(n)
    for i in range(n):
        wi = w[i]
        if code == 1:
            fw[i] = np.exp(wi)
        else:
            if wi <= 0.0:
                return out, 2
            if code == 0:
                fw[i] = np.log(wi)
            elif code == 2:
                fw[i] = np.sqrt(wi)
            else:
                fw[i] = 1.0 / np.sqrt(wi)
    out[:] = np.dot(v * fw, v.T)
    return _sym(out), 0


@njit(cache=True)
def karcher_mean_core(xs, max_iter, tol, le_init):
    """Fixed-point Karcher (Frechet) mean of a stack of SPD matrices.

    Iterates ``G <- G^1/2 exp(mean_i log(G^-1/2 X_i G^-1/2)) G^1/2`` until
    the Frobenius norm of the tangent mean drops below ``tol``.  The start
    point is the arithmetic mean, or the log-Euclidean mean when
    ``le_init`` is set (same fixed point, fewer iterations).  Per-sample
    eigenbases are carried between iterations to warm-start the solver.

    Returns (mean, iterations, residual, status): status 0 on convergence,
    1 on eigensolver failure, 2 on a domain violation, 3 when ``max_iter``
    is exhausted.
    """
    b, n, _ = xs.shape
    g = np.zeros((n, n))
    if le_init:
        for i in range(b):
            lm, st = _eig_fn(xs[i], 0)
            if st != 0:
                return g, 0, np.inf, st
            g += lm
        g, st = _eig_fn(_sym(g / b), 1)
        if st != 0:
            return g, 0, np.inf, st
    else:
        for i in range(b):
            g += xs[i]
        g = _sym(g / b)

    bases = np.empty((b, n, n))
    have_bases = False
    vg = np.eye(n)
    have_vg = False
    resid = np.inf
    for it in range(max_iter):
        if have_vg:
            w, vg, sweeps = jacobi_eigh_warm(g, vg, JACOBI_TOL, JACOBI_MAX_SWEEPS)
        else:
            w, vg, sweeps = jacobi_eigh(g, JACOBI_TOL, JACOBI_MAX_SWEEPS)
            have_vg = True
        if sweeps < 0:
            return g, it, resid, 1
        if w[n - 1] <= 0.0:
            return g, it, resid, 2
        gs = np.dot(vg * np.sqrt(w), vg.T)
        gis = np.dot(vg * (1.0 / np.sqrt(w)), vg.T)

        t = np.zeros((n, n))
        for i in range(b):
            m = _sym(np.dot(np.dot(gis, xs[i]), gis))
            if have_bases:
                mw, mv, sweeps = jacobi_eigh_warm(
                    m, bases[i], JACOBI_TOL, JACOBI_MAX_SWEEPS
                )
            else:
                mw, mv, sweeps = jacobi_eigh(m, JACOBI_TOL, JACOBI_MAX_SWEEPS)
            if sweeps < 0:
                return g, it, resid, 1
            if mw[n - 1] <= 0.0:
                return g, it, resid, 2
            bases[i] = mv
            t += np.dot(mv * np.log(mw), mv.T)
        have_bases = True
        t = _sym(t / b)
        resid = np.sqrt(np.sum(t * t))
        if resid < tol:
            return g, it, resid, 0
        e, st = _eig_fn(t, 1)
        if st != 0:
            return g, it, resid, st
        g = _sym(np.dot(np.dot(gs, e), gs))
    return g, max_iter, resid, 3
