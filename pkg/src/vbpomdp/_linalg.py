"""Batched linear algebra for stacks of small symmetric matrices.

numpy's batched LAPACK wrappers carry a per-matrix overhead that dominates
when the stacks hold millions of 2x2 or 4x4 matrices (pairwise Gaussian
overlaps in backups).  The routines here unroll the factorizations over the
matrix entries and vectorize over the batch instead.
"""

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

# pairs per chunk in pairwise kernels; bounds peak memory to ~100 MB at N=4
PAIR_CHUNK = 1 << 18


def cholesky(S):
    """Lower Cholesky factors of a stack ``S[..., N, N]`` of SPD matrices.

    Returns ``L`` with ``L @ L.T == S``.  Non-positive pivots propagate as NaN
    rather than raising; callers check the result where it matters.
    """
    S = np.asarray(S, dtype=float)
    n = S.shape[-1]
    L = np.zeros_like(S)
    with np.errstate(invalid="ignore", divide="ignore"):
        for j in range(n):
            d = S[..., j, j] - np.einsum("...k,...k->...", L[..., j, :j], L[..., j, :j])
            L[..., j, j] = np.sqrt(d)
            for i in range(j + 1, n):
                s = S[..., i, j] - np.einsum("...k,...k->...", L[..., i, :j], L[..., j, :j])
                L[..., i, j] = s / L[..., j, j]
    return L


def logdet(S):
    """log|S| for a stack of SPD matrices (NaN where S is not PD)."""
    S = np.asarray(S, dtype=float)
    n = S.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        if n == 1:
            return np.log(S[..., 0, 0])
        if n == 2:
            det = S[..., 0, 0] * S[..., 1, 1] - S[..., 0, 1] * S[..., 1, 0]
            out = np.log(det)
            return np.where((S[..., 0, 0] > 0) & (det > 0), out, np.nan)
        L = cholesky(S)
        return 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)


def gauss_logpdf(diff, S):
    """log N(diff | 0, S), vectorized over the leading axes of both arguments.

    ``diff`` has shape ``(..., N)`` and ``S`` shape ``(..., N, N)``; leading
    axes broadcast.
    """
    diff = np.asarray(diff, dtype=float)
    S = np.asarray(S, dtype=float)
    n = diff.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        if n == 1:
            var = S[..., 0, 0]
            return -0.5 * (LOG_2PI + np.log(var) + diff[..., 0] ** 2 / var)
        if n == 2:
            a = S[..., 0, 0]
            b = S[..., 0, 1]
            c = S[..., 1, 1]
            det = a * c - b * b
            x = diff[..., 0]
            y = diff[..., 1]
            maha = (c * x * x - 2.0 * b * x * y + a * y * y) / det
            return -0.5 * (2.0 * LOG_2PI + np.log(det) + maha)
        L = cholesky(S)
        z = forward_solve(L, diff)
        half_logdet = np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
        return -0.5 * (n * LOG_2PI + (z * z).sum(axis=-1)) - half_logdet


def forward_solve(L, b):
    """Solve ``L z = b`` for lower-triangular stacks ``L``."""
    b = np.asarray(b, dtype=float)
    n = b.shape[-1]
    shape = np.broadcast_shapes(L.shape[:-2], b.shape[:-1]) + (n,)
    z = np.empty(shape)
    for i in range(n):
        s = b[..., i] - np.einsum("...k,...k->...", L[..., i, :i], z[..., :i])
        z[..., i] = s / L[..., i, i]
    return z


def inv_spd(S):
    """Inverse of a stack of SPD matrices, symmetrized."""
    S = np.asarray(S, dtype=float)
    n = S.shape[-1]
    if n == 1:
        return 1.0 / S
    if n == 2:
        a = S[..., 0, 0]
        b = S[..., 0, 1]
        c = S[..., 1, 1]
        det = a * c - b * b
        out = np.empty_like(S)
        out[..., 0, 0] = c / det
        out[..., 1, 1] = a / det
        out[..., 0, 1] = -b / det
        out[..., 1, 0] = -b / det
        return out
    out = np.linalg.inv(S)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def symmetrize(S):
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def pairwise_log_overlap(mu_a, cov_a, mu_b, cov_b):
    """log N(mu_b[j] | mu_a[i], cov_a[i] + cov_b[j]) for all (i, j).

    This is the log of the integral of the product of the two normalized
    Gaussians, the building block of inner products, ISD and backups.
    Returns an ``(A, B)`` array.
    """
    mu_a = np.asarray(mu_a, dtype=float)
    mu_b = np.asarray(mu_b, dtype=float)
    A, n = mu_a.shape
    B = mu_b.shape[0]
    out = np.empty((A, B))
    rows = max(1, PAIR_CHUNK // max(B, 1))
    for start in range(0, A, rows):
        stop = min(A, start + rows)
        diff = mu_b[None, :, :] - mu_a[start:stop, None, :]
        S = cov_a[start:stop, None, :, :] + cov_b[None, :, :, :]
        out[start:stop] = gauss_logpdf(diff, S)
    return out
