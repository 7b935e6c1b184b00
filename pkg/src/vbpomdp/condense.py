"""Gaussian-mixture condensation.

Two reducers are provided: greedy Runnalls merging on the KL upper bound,
and the hybrid that first k-means-clusters the mixands and runs Runnalls
inside each cluster with a budget proportional to the cluster size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from . import _linalg
from .gm import GaussianComponent, GaussianMixture, MixtureKind

METRICS = ("euclidean", "symKL", "jsd", "wasserstein2", "bhattacharyya")
METHODS = ("hybrid", "runnalls")


@dataclass(frozen=True)
class CondenseConfig:
    """Settings for :func:`condense`.

    Parameters
    ----------
    target_size : int
        Maximum number of output components.
    cluster_count : int
        Number of k-means clusters for the hybrid method.
    metric : str
        One of :data:`METRICS`, used for k-means assignment.
    kmeans_max_iter : int
    seed : int
        Seeds the k-means initialization.
    method : str
        ``"hybrid"`` (default) or ``"runnalls"``.
    max_cluster_size : int or None
        When set, the cluster count grows to ``ceil(M / max_cluster_size)``
        (capped at ``target_size``) so very large mixtures keep Runnalls
        subproblems small.
    """

    target_size: int = 20
    cluster_count: int = 4
    metric: str = "euclidean"
    kmeans_max_iter: int = 20
    seed: int = 0
    method: str = "hybrid"
    max_cluster_size: int | None = None

    def __post_init__(self):
        if self.cluster_count < 1 or self.target_size < self.cluster_count:
            raise ValueError("need target_size >= cluster_count >= 1")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if self.method not in METHODS:
            raise ValueError(f"unknown condensation method {self.method!r}")
        if self.kmeans_max_iter < 1:
            raise ValueError("kmeans_max_iter must be positive")
        if self.max_cluster_size is not None and self.max_cluster_size < 2:
            raise ValueError("max_cluster_size must be at least 2")


# --------------------------------------------------------------------------
# Runnalls


def _merge_abs(a_i, m_i, S_i, a_j, m_j, S_j):
    """Moment merge on nonnegative weights; equal split when both are zero."""
    tot = np.asarray(a_i + a_j, dtype=float)
    fi = np.divide(a_i, tot, out=np.full(tot.shape, 0.5), where=tot > 0)
    fj = 1.0 - fi
    d = m_i - m_j
    fi_ = fi[..., None]
    fj_ = fj[..., None]
    mean = m_j + fi_ * d
    cov = fi_[..., None] * S_i + fj_[..., None] * S_j + (fi_ * fj_ * d)[..., :, None] * d[..., None, :]
    return mean, cov


def _merge_cost(a_i, m_i, S_i, ld_i, a_j, m_j, S_j, ld_j):
    _, cov = _merge_abs(a_i, m_i, S_i, a_j, m_j, S_j)
    cost = 0.5 * ((a_i + a_j) * _linalg.logdet(cov) - a_i * ld_i - a_j * ld_j)
    return np.maximum(cost, 0.0)


def kl_merge_bound(a: GaussianComponent, b: GaussianComponent) -> float:
    """Runnalls' upper bound on the KL cost of merging ``a`` and ``b``.

    Weights enter through their absolute values.
    """
    if a.dimension != b.dimension:
        raise ValueError("components have different dimensions")
    ld_a = _linalg.logdet(a.cov)
    ld_b = _linalg.logdet(b.cov)
    if not (np.isfinite(ld_a) and np.isfinite(ld_b)):
        raise np.linalg.LinAlgError("singular covariance")
    return float(_merge_cost(np.array(abs(a.weight)), a.mean, a.cov, ld_a,
                             np.array(abs(b.weight)), b.mean, b.cov, ld_b))


@nb.njit(cache=True)
def _logdet_small(S):
    n = S.shape[0]
    L = np.zeros((n, n))
    out = 0.0
    for j in range(n):
        d = S[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if d <= 0.0:
            return np.nan
        L[j, j] = np.sqrt(d)
        out += np.log(L[j, j])
        for i in range(j + 1, n):
            v = S[i, j]
            for k in range(j):
                v -= L[i, k] * L[j, k]
            L[i, j] = v / L[j, j]
    return 2.0 * out


@nb.njit(cache=True)
def _pair_cost(a, mu, S, ld, i, j, scratch):
    tot = a[i] + a[j]
    fi = a[i] / tot if tot > 0.0 else 0.5
    fj = 1.0 - fi
    n = mu.shape[1]
    for r in range(n):
        dr = mu[i, r] - mu[j, r]
        for c in range(n):
            scratch[r, c] = fi * S[i, r, c] + fj * S[j, r, c] + fi * fj * dr * (mu[i, c] - mu[j, c])
    cost = 0.5 * (tot * _logdet_small(scratch) - a[i] * ld[i] - a[j] * ld[j])
    return max(cost, 0.0)


@nb.njit(cache=True)
def _runnalls_core(w, mu, S, target):
    """Greedy merging in place; returns the mask of surviving slots."""
    M = w.size
    n = mu.shape[1]
    a = np.abs(w)
    ld = np.empty(M)
    for k in range(M):
        ld[k] = _logdet_small(S[k])
    alive = np.ones(M, dtype=np.bool_)
    scratch = np.empty((n, n))
    cost = np.full((M, M), np.inf)
    for i in range(M):
        for j in range(i + 1, M):
            if w[i] * w[j] >= 0.0:
                cost[i, j] = _pair_cost(a, mu, S, ld, i, j, scratch)
    count = M
    while count > target:
        best = np.inf
        bi = -1
        bj = -1
        for i in range(M):
            if not alive[i]:
                continue
            for j in range(i + 1, M):
                if cost[i, j] < best:
                    best = cost[i, j]
                    bi = i
                    bj = j
        if bi < 0:
            # only opposite-sign pairs remain
            for i in range(M):
                if not alive[i]:
                    continue
                for j in range(i + 1, M):
                    if alive[j]:
                        c = _pair_cost(a, mu, S, ld, i, j, scratch)
                        if c < best or bi < 0:
                            best = c
                            bi = i
                            bj = j
        i = bi
        j = bj
        # same-sign pairs merge exactly like their magnitudes
        tot = a[i] + a[j]
        fi = a[i] / tot if tot > 0.0 else 0.5
        fj = 1.0 - fi
        d = mu[i] - mu[j]
        for r in range(n):
            for c in range(n):
                S[i, r, c] = fi * S[i, r, c] + fj * S[j, r, c] + fi * fj * d[r] * d[c]
        for r in range(n):
            mu[i, r] = mu[j, r] + fi * d[r]
        w[i] += w[j]
        a[i] = abs(w[i])
        ld[i] = _logdet_small(S[i])
        alive[j] = False
        for k in range(M):
            cost[j, k] = np.inf
            cost[k, j] = np.inf
        for k in range(M):
            if k == i or not alive[k]:
                continue
            c = _pair_cost(a, mu, S, ld, i, k, scratch) if w[i] * w[k] >= 0.0 else np.inf
            if k < i:
                cost[k, i] = c
            else:
                cost[i, k] = c
        count -= 1
    return alive


def _runnalls_arrays(w, mu, S, target):
    """Greedy Runnalls reduction on raw arrays; returns reduced copies.

    Opposite-sign pairs are only merged once no same-sign pair is left.
    Ties in the bound go to the lowest ``(i, j)``.
    """
    if w.size <= target:
        return w, mu, S
    w = np.array(w, dtype=float)
    mu = np.array(mu, dtype=float)
    S = np.array(S, dtype=float)
    keep = _runnalls_core(w, mu, S, int(target))
    return w[keep], mu[keep], S[keep]


def runnalls(mixture: GaussianMixture, target: int) -> GaussianMixture:
    """Reduce ``mixture`` to at most ``target`` components by greedy merging.

    The pair with the smallest KL bound is merged first; ties go to the
    lowest ``(i, j)``.  Total weight, mean and second moment are preserved
    for same-sign merges.
    """
    if target < 1:
        raise ValueError("target must be at least 1")
    if mixture.size <= target:
        return mixture
    w, mu, S = _runnalls_arrays(mixture.weights, mixture.means, mixture.covs, target)
    return GaussianMixture(w, mu, S, mixture.kind, dimension=mixture.dimension, check=False)


# --------------------------------------------------------------------------
# distances between Gaussians


def _sqrtm_psd(S):
    vals, vecs = np.linalg.eigh(S)
    vals = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def _kl(mu_a, S_a, mu_b, S_b):
    """KL(N_a || N_b), broadcasting."""
    n = mu_a.shape[-1]
    Sb_inv = np.linalg.inv(S_b)
    d = mu_b - mu_a
    tr = np.einsum("...ij,...ji->...", Sb_inv, S_a)
    maha = np.einsum("...i,...ij,...j->...", d, Sb_inv, d)
    return 0.5 * (tr + maha - n + _linalg.logdet(S_b) - _linalg.logdet(S_a))


def distance_arrays(mu_a, S_a, mu_b, S_b, metric: str):
    """Elementwise distance between Gaussians; leading axes broadcast."""
    mu_a, S_a, mu_b, S_b = (np.asarray(x, dtype=float) for x in (mu_a, S_a, mu_b, S_b))
    d = mu_a - mu_b
    if metric == "euclidean":
        return np.sqrt(np.einsum("...i,...i->...", d, d))
    if metric == "symKL":
        n = mu_a.shape[-1]
        Ia = np.linalg.inv(S_a)
        Ib = np.linalg.inv(S_b)
        tr = np.einsum("...ij,...ji->...", Ib, S_a) + np.einsum("...ij,...ji->...", Ia, S_b)
        maha = np.einsum("...i,...ij,...j->...", d, Ia + Ib, d)
        return np.maximum(0.5 * (tr + maha) - n, 0.0)
    if metric == "jsd":
        # the midpoint mixture is replaced by its moment-matched Gaussian
        mu_m = 0.5 * (mu_a + mu_b)
        S_m = 0.5 * (S_a + S_b) + 0.25 * d[..., :, None] * d[..., None, :]
        out = 0.5 * (_kl(mu_a, S_a, mu_m, S_m) + _kl(mu_b, S_b, mu_m, S_m))
        return np.maximum(out, 0.0)
    if metric == "wasserstein2":
        ra = _sqrtm_psd(S_a)
        cross = _sqrtm_psd(ra @ S_b @ ra)
        tr = np.einsum("...ii->...", S_a + S_b - 2.0 * cross)
        return np.sqrt(np.maximum(np.einsum("...i,...i->...", d, d) + tr, 0.0))
    if metric == "bhattacharyya":
        S = 0.5 * (S_a + S_b)
        maha = np.einsum("...i,...ij,...j->...", d, np.linalg.inv(S), d)
        out = 0.125 * maha + 0.5 * (_linalg.logdet(S) - 0.5 * (_linalg.logdet(S_a) + _linalg.logdet(S_b)))
        return np.maximum(out, 0.0)
    raise ValueError(f"unknown metric {metric!r}")


def pair_distance(a: GaussianComponent, b: GaussianComponent, metric: str) -> float:
    """Distance between the normalized densities of two components."""
    if a.dimension != b.dimension:
        raise ValueError("components have different dimensions")
    return float(distance_arrays(a.mean, a.cov, b.mean, b.cov, metric))


def pairwise_distances(mu_a, S_a, mu_b, S_b, metric: str):
    """``(A, B)`` matrix of distances between two stacks of Gaussians."""
    return distance_arrays(mu_a[:, None], S_a[:, None], mu_b[None, :], S_b[None, :], metric)


# --------------------------------------------------------------------------
# clustering


def kmeans_cluster(mixture: GaussianMixture, K: int, metric: str = "euclidean", max_iter: int = 20,
                   seed: int = 0) -> list[np.ndarray]:
    """Partition mixand indices into at most ``K`` nonempty clusters.

    Initialization is farthest-point seeding from a seed-chosen first mixand.
    Centroids have the unweighted mean of member means and the
    ``|w|``-weighted average of member covariances.
    """
    M = mixture.size
    if K < 1 or K > M:
        raise ValueError("need 1 <= K <= mixture size")
    if K == M:
        return [np.array([i]) for i in range(M)]
    mu, S = mixture.means, mixture.covs
    a = np.abs(mixture.weights)
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(M))]
    nearest = pairwise_distances(mu, S, mu[chosen], S[chosen], metric)[:, 0]
    while len(chosen) < K:
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, pairwise_distances(mu, S, mu[[nxt]], S[[nxt]], metric)[:, 0])
    c_mu = mu[chosen].copy()
    c_S = S[chosen].copy()

    assign = None
    for _ in range(max_iter):
        dist = pairwise_distances(mu, S, c_mu, c_S, metric)
        new = np.argmin(dist, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        onehot = (assign[:, None] == np.arange(K)[None, :]).astype(float)
        counts = onehot.sum(axis=0)
        filled = counts > 0
        c_mu[filled] = (onehot.T @ mu)[filled] / counts[filled, None]
        wk = onehot * a[:, None]
        mass = wk.sum(axis=0)
        cov_sum = (wk.T @ S.reshape(M, -1)).reshape(K, *S.shape[1:])
        plain = (onehot.T @ S.reshape(M, -1)).reshape(K, *S.shape[1:])
        pos = mass > 0
        c_S[pos] = cov_sum[pos] / mass[pos, None, None]
        zero = filled & ~pos
        c_S[zero] = plain[zero] / counts[zero, None, None]
    return [np.flatnonzero(assign == k) for k in range(K) if np.any(assign == k)]


def cluster_budgets(sizes, target: int) -> list[int]:
    """Per-cluster Runnalls targets ``max(1, floor(h * target / M))``.

    If the minimum-of-one rule pushes the total above ``target``, the largest
    budgets are decremented (ties to the lowest cluster index).
    """
    sizes = [int(h) for h in sizes]
    M = sum(sizes)
    budget = [max(1, (h * target) // M) for h in sizes]
    while sum(budget) > target:
        k = max(range(len(budget)), key=lambda i: (budget[i], -i))
        if budget[k] <= 1:
            break
        budget[k] -= 1
    return budget


def cluster_condense(mixture: GaussianMixture, config: CondenseConfig) -> GaussianMixture:
    """Hybrid condensation: k-means clusters, then Runnalls per cluster."""
    M = mixture.size
    target = config.target_size
    if M <= target:
        return mixture
    K = config.cluster_count
    if config.max_cluster_size is not None:
        K = max(K, math.ceil(M / config.max_cluster_size))
    K = min(K, target, M)
    clusters = kmeans_cluster(mixture, K, config.metric, config.kmeans_max_iter, config.seed)
    budgets = cluster_budgets([c.size for c in clusters], target)
    parts = [_runnalls_arrays(mixture.weights[c], mixture.means[c], mixture.covs[c], psi)
             for c, psi in zip(clusters, budgets)]
    w = np.concatenate([p[0] for p in parts])
    mu = np.concatenate([p[1] for p in parts])
    S = np.concatenate([p[2] for p in parts])
    return GaussianMixture(w, mu, S, mixture.kind, dimension=mixture.dimension, check=False)


def condense(mixture: GaussianMixture, config: CondenseConfig | None) -> GaussianMixture:
    """Apply the configured reducer; ``None`` disables condensation."""
    if config is None or mixture.size <= config.target_size:
        return mixture
    if config.method == "runnalls":
        return runnalls(mixture, config.target_size)
    return cluster_condense(mixture, config)


def condense_belief(mixture: GaussianMixture, config: CondenseConfig | None) -> GaussianMixture:
    """Condense and keep the belief kind (merging preserves total weight)."""
    out = condense(mixture, config)
    if mixture.kind is MixtureKind.BELIEF and out is not mixture:
        w = out.weights / out.weights.sum()
        out = GaussianMixture(w, out.means, out.covs, MixtureKind.BELIEF, check=False)
    return out
