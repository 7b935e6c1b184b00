"""Gaussian and Gaussian-mixture algebra.

Mixtures are stored as three stacked arrays (weights ``(M,)``, means
``(M, N)``, covariances ``(M, N, N)``) so that the pairwise kernels used by
inner products, ISD and Bellman backups stay vectorized.  Instances are
immutable: the arrays are flagged read-only at construction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _linalg


class DimensionError(ValueError):
    """Operands disagree on state dimension."""


class NotPositiveDefiniteError(ValueError):
    """A covariance matrix is not symmetric positive definite."""


class MixtureKind(str, enum.Enum):
    BELIEF = "belief"
    LIKELIHOOD = "likelihood"
    REWARD = "reward-or-alpha"


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def check_covariances(covs):
    """Raise unless every matrix in the stack is symmetric positive definite.

    Symmetry tolerance is ``1e-10 * max|S|``; eigenvalues must exceed
    ``1e-12 * trace``.  Near-singular matrices are rejected, not regularized.
    """
    covs = np.asarray(covs, dtype=float)
    if covs.ndim != 3 or covs.shape[1] != covs.shape[2]:
        raise DimensionError(f"covariance stack has shape {covs.shape}")
    if covs.shape[0] == 0:
        return
    if not np.all(np.isfinite(covs)):
        raise NotPositiveDefiniteError("covariance has non-finite entries")
    scale = np.abs(covs).max(axis=(1, 2))
    asym = np.abs(covs - np.swapaxes(covs, 1, 2)).max(axis=(1, 2))
    if np.any(asym > 1e-10 * scale):
        raise NotPositiveDefiniteError("covariance is not symmetric")
    eig = np.linalg.eigvalsh(covs)
    trace = np.trace(covs, axis1=1, axis2=2)
    if np.any(eig[:, 0] <= 1e-12 * np.abs(trace)) or np.any(trace <= 0):
        raise NotPositiveDefiniteError("covariance is not positive definite")


@dataclass(frozen=True)
class GaussianComponent:
    """A single weighted Gaussian ``weight * N(s | mean, cov)``."""

    weight: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionError(
                f"mean of length {mean.size} does not match covariance {cov.shape}"
            )
        check_covariances(cov[None])
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))

    @property
    def dimension(self) -> int:
        return self.mean.size

    def evaluate(self, point) -> float:
        point = np.asarray(point, dtype=float).reshape(-1)
        if point.size != self.dimension:
            raise DimensionError("point dimension mismatch")
        return float(self.weight * np.exp(_linalg.gauss_logpdf(point - self.mean, self.cov)))


class GaussianMixture:
    """Weighted sum of multivariate Gaussians.

    Parameters
    ----------
    weights : array_like, shape (M,)
    means : array_like, shape (M, N)
    covs : array_like, shape (M, N, N)
    kind : MixtureKind
        ``belief`` mixtures must have positive weights summing to one,
        ``likelihood`` mixtures positive weights, ``reward-or-alpha`` any sign.
    dimension : int, optional
        Required only when the mixture is empty.
    check : bool
        Validate covariances and weight constraints.  Internal hot paths that
        build mixtures from already-validated pieces pass ``False``.
    """

    __slots__ = ("weights", "means", "covs", "kind", "dimension")

    def __init__(self, weights, means, covs, kind=MixtureKind.REWARD, dimension=None, check=True):
        kind = MixtureKind(kind)
        weights = np.asarray(weights, dtype=float).reshape(-1)
        M = weights.size
        if dimension is None:
            if M == 0:
                raise DimensionError("empty mixture needs an explicit dimension")
            dimension = np.asarray(means).reshape(M, -1).shape[1]
        means = np.asarray(means, dtype=float).reshape(M, dimension)
        covs = np.asarray(covs, dtype=float).reshape(M, dimension, dimension)
        if check:
            check_covariances(covs)
            if not np.all(np.isfinite(weights)) or not np.all(np.isfinite(means)):
                raise ValueError("mixture has non-finite weights or means")
            if kind is MixtureKind.BELIEF:
                if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
                    raise ValueError("belief weights must be positive and sum to 1")
            elif kind is MixtureKind.LIKELIHOOD and np.any(weights <= 0):
                raise ValueError("likelihood weights must be positive")
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "covs", _frozen(covs))
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "dimension", int(dimension))

    def __setattr__(self, name, value):
        raise AttributeError("GaussianMixture is immutable")

    def __len__(self):
        return self.weights.size

    @property
    def size(self) -> int:
        return self.weights.size

    def __repr__(self):
        return f"GaussianMixture(size={self.size}, dimension={self.dimension}, kind={self.kind.value})"

    @classmethod
    def from_components(cls, components: Iterable[GaussianComponent], kind=MixtureKind.REWARD,
                        dimension=None):
        components = list(components)
        if not components:
            if dimension is None:
                raise DimensionError("empty mixture needs an explicit dimension")
            return cls(np.zeros(0), np.zeros((0, dimension)), np.zeros((0, dimension, dimension)),
                       kind, dimension=dimension)
        n = components[0].dimension
        if any(c.dimension != n for c in components):
            raise DimensionError("components disagree on dimension")
        return cls([c.weight for c in components], [c.mean for c in components],
                   [c.cov for c in components], kind)

    @property
    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(w, m, c) for w, m, c in zip(self.weights, self.means, self.covs)]

    def component(self, index: int) -> GaussianComponent:
        return GaussianComponent(self.weights[index], self.means[index], self.covs[index])

    def with_weights(self, weights, kind=None) -> "GaussianMixture":
        return GaussianMixture(weights, self.means, self.covs, kind or self.kind,
                               dimension=self.dimension, check=False)

    def with_kind(self, kind) -> "GaussianMixture":
        return GaussianMixture(self.weights, self.means, self.covs, kind,
                               dimension=self.dimension, check=False)

    def scaled(self, factor: float) -> "GaussianMixture":
        kind = self.kind if self.kind is MixtureKind.REWARD else MixtureKind.REWARD
        return self.with_weights(self.weights * factor, kind)

    def subset(self, indices) -> "GaussianMixture":
        idx = np.asarray(indices, dtype=int)
        return GaussianMixture(self.weights[idx], self.means[idx], self.covs[idx], MixtureKind.REWARD
                               if self.kind is MixtureKind.BELIEF else self.kind,
                               dimension=self.dimension, check=False)

    def total_weight(self) -> float:
        return float(self.weights.sum())

    def mean(self) -> np.ndarray:
        """Weight-normalized first moment."""
        w = self.weights / self.weights.sum()
        return w @ self.means

    def moments(self):
        """Raw (unnormalized) zeroth, first and second moments."""
        w = self.weights
        m0 = w.sum()
        m1 = w @ self.means
        m2 = np.einsum("k,kij->ij", w, self.covs + np.einsum("ki,kj->kij", self.means, self.means))
        return m0, m1, m2

    def evaluate(self, points) -> np.ndarray:
        """Evaluate at one point ``(N,)`` or a batch ``(P, N)``."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[1] != self.dimension:
            raise DimensionError(f"points of dimension {pts.shape[1]} for a {self.dimension}-D mixture")
        if self.size == 0:
            out = np.zeros(pts.shape[0])
        else:
            logp = _linalg.gauss_logpdf(pts[:, None, :] - self.means[None], self.covs[None])
            out = np.exp(logp) @ self.weights
        return float(out[0]) if single else out

    def sample(self, rng: np.random.Generator, count: int = 1) -> np.ndarray:
        """Draw states from a mixture with nonnegative weights."""
        w = np.clip(self.weights, 0, None)
        idx = rng.choice(self.size, size=count, p=w / w.sum())
        L = np.linalg.cholesky(self.covs[idx])
        z = rng.standard_normal((count, self.dimension))
        return self.means[idx] + np.einsum("kij,kj->ki", L, z)

    def to_json_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "kind": self.kind.value,
            "components": [
                {"weight": float(w), "mean": m.tolist(), "covariance": c.tolist()}
                for w, m, c in zip(self.weights, self.means, self.covs)
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "GaussianMixture":
        try:
            n = int(data["dimension"])
            kind = MixtureKind(data.get("kind", MixtureKind.REWARD.value))
            comps = data["components"]
            weights = [float(c["weight"]) for c in comps]
            means = [c["mean"] for c in comps]
            covs = [c["covariance"] for c in comps]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed mixture JSON: missing or invalid field {exc}") from exc
        return cls(weights, np.reshape(means, (len(comps), n)), np.reshape(covs, (len(comps), n, n)),
                   kind, dimension=n)


def concat(mixtures: Sequence[GaussianMixture], kind=MixtureKind.REWARD) -> GaussianMixture:
    dims = {m.dimension for m in mixtures}
    if len(dims) != 1:
        raise DimensionError("cannot concatenate mixtures of different dimensions")
    n = dims.pop()
    return GaussianMixture(
        np.concatenate([m.weights for m in mixtures]),
        np.concatenate([m.means for m in mixtures]).reshape(-1, n),
        np.concatenate([m.covs for m in mixtures]).reshape(-1, n, n),
        kind, dimension=n, check=False,
    )


def evaluate(mixture: GaussianMixture, point) -> float:
    return mixture.evaluate(point)


def gaussian_product(a: GaussianComponent, b: GaussianComponent) -> GaussianComponent:
    """Product of two weighted Gaussians as a single weighted Gaussian.

    The weight absorbs the overlap ``N(mu_b | mu_a, S_a + S_b)``; the shape has
    covariance ``(S_a^-1 + S_b^-1)^-1`` and the precision-weighted mean.
    """
    if a.dimension != b.dimension:
        raise DimensionError("gaussian_product of different dimensions")
    S = a.cov + b.cov
    if np.linalg.eigvalsh(S)[0] <= 0:
        raise NotPositiveDefiniteError("singular covariance sum")
    overlap = np.exp(_linalg.gauss_logpdf(b.mean - a.mean, S))
    # c2 = Sa (Sa + Sb)^-1 Sb and c1 = Sb (Sa+Sb)^-1 mu_a + Sa (Sa+Sb)^-1 mu_b avoid inverting Sa, Sb
    cov = a.cov @ np.linalg.solve(S, b.cov)
    cov = 0.5 * (cov + cov.T)
    mean = b.cov @ np.linalg.solve(S, a.mean) + a.cov @ np.linalg.solve(S, b.mean)
    return GaussianComponent(a.weight * b.weight * overlap, mean, cov)


def product_mixture(f: GaussianMixture, g: GaussianMixture, kind=MixtureKind.REWARD) -> GaussianMixture:
    """Pointwise product of two mixtures, ``|f| * |g|`` components (f-major)."""
    if f.dimension != g.dimension:
        raise DimensionError("product_mixture of different dimensions")
    n = f.dimension
    S = f.covs[:, None] + g.covs[None, :]
    logov = _linalg.gauss_logpdf(g.means[None, :] - f.means[:, None], S)
    weights = (f.weights[:, None] * g.weights[None, :]) * np.exp(logov)
    Sinv = _linalg.inv_spd(S)
    cov = np.einsum("aij,abjk,bkl->abil", f.covs, Sinv, g.covs)
    cov = _linalg.symmetrize(cov)
    mean = (np.einsum("bij,abjk,ak->abi", g.covs, Sinv, f.means)
            + np.einsum("aij,abjk,bk->abi", f.covs, Sinv, g.means))
    return GaussianMixture(weights.reshape(-1), mean.reshape(-1, n), cov.reshape(-1, n, n), kind,
                           dimension=n, check=False)


def overlap_matrix(f: GaussianMixture, g: GaussianMixture) -> np.ndarray:
    """Per-pair contributions ``w_k w_q N(mu_q | mu_k, S_k + S_q)``."""
    if f.dimension != g.dimension:
        raise DimensionError("inner product of mixtures of different dimensions")
    if f.size == 0 or g.size == 0:
        return np.zeros((f.size, g.size))
    logov = _linalg.pairwise_log_overlap(f.means, f.covs, g.means, g.covs)
    return f.weights[:, None] * np.exp(logov) * g.weights[None, :]


def inner_product(f: GaussianMixture, g: GaussianMixture) -> float:
    """Integral of the product of two mixtures."""
    return float(overlap_matrix(f, g).sum())


def moment_merge(a: GaussianComponent, b: GaussianComponent) -> GaussianComponent:
    """Merge two components preserving mass, mean and second moment."""
    if a.dimension != b.dimension:
        raise DimensionError("moment_merge of different dimensions")
    w, mean, cov = merge_arrays(a.weight, a.mean, a.cov, b.weight, b.mean, b.cov)
    return GaussianComponent(w, mean, cov)


def merge_arrays(wa, ma, Sa, wb, mb, Sb):
    """Array form of :func:`moment_merge`; broadcasts over leading axes."""
    wm = wa + wb
    if np.any(wm == 0):
        raise ValueError("cannot merge components with zero total weight")
    fa = np.asarray(wa / wm)
    fb = np.asarray(wb / wm)
    d = ma - mb
    mean = fa[..., None] * ma + fb[..., None] * mb
    cov = (fa[..., None, None] * Sa + fb[..., None, None] * Sb
           + (fa * fb)[..., None, None] * (d[..., :, None] * d[..., None, :]))
    return wm, mean, cov


def _canonical_key(m: GaussianMixture) -> bytes:
    return m.weights.tobytes() + m.means.tobytes() + m.covs.tobytes()


def isd_terms(f: GaussianMixture, g: GaussianMixture):
    """``(J_ff, J_fg, J_gg)`` of the integral squared difference.

    The cross term is always summed in the same argument order so that the
    ISD is exactly symmetric.
    """
    a, b = (f, g) if _canonical_key(f) <= _canonical_key(g) else (g, f)
    return (inner_product(f, f), inner_product(a, b), inner_product(g, g))


def mixture_isd(f: GaussianMixture, g: GaussianMixture, normalized: bool = False) -> float:
    """Integral squared difference between two mixtures (or its normalized form in [0, 1])."""
    jff, jfg, jgg = isd_terms(f, g)
    isd = max((jff + jgg) - 2.0 * jfg, 0.0)
    if not normalized:
        return isd
    denom = jff + jgg
    if denom <= 0:
        return 0.0
    return float(min(1.0, np.sqrt(isd / denom)))


def normalize(mixture: GaussianMixture) -> GaussianMixture:
    """Rescale positive weights to sum to one; the result is a belief.

    Tiny weights (max below 1e-100) are first divided by their maximum so the
    sum does not underflow.
    """
    w = mixture.weights
    if w.size == 0 or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("normalize requires finite, strictly positive weights")
    top = w.max()
    if top < 1e-100:
        w = w / top
    w = w / w.sum()
    return GaussianMixture(w, mixture.means, mixture.covs, MixtureKind.BELIEF,
                           dimension=mixture.dimension, check=False)


@dataclass(frozen=True)
class MixtureGenSpec:
    """Parameters of the random benchmark-mixture generator."""

    dimension: int
    components: int
    mean_low: float | Sequence[float] = 0.0
    mean_high: float | Sequence[float] = 10.0
    wishart_dof: int | None = None
    wishart_scale: float = 2.0
    weight_low: float = 0.0
    weight_high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.dimension < 1 or self.components < 1:
            raise ValueError("dimension and component count must be positive")
        lo = np.broadcast_to(np.asarray(self.mean_low, float), (self.dimension,))
        hi = np.broadcast_to(np.asarray(self.mean_high, float), (self.dimension,))
        if np.any(lo >= hi) or self.weight_low >= self.weight_high:
            raise ValueError("range low must be below high")
        if self.weight_low < 0:
            raise ValueError("weights must be drawn from a nonnegative range")
        dof = self.dimension if self.wishart_dof is None else self.wishart_dof
        if dof < self.dimension:
            raise ValueError("Wishart degrees of freedom must be >= dimension")
        if self.wishart_scale <= 0:
            raise ValueError("Wishart scale must be positive")


def _component_rng(seed: int, index: int) -> np.random.Generator:
    # one Philox stream per (seed, index): generation order cannot change the output
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def random_mixture(spec: MixtureGenSpec) -> GaussianMixture:
    """Random benchmark mixture: uniform means and weights, Wishart covariances."""
    n = spec.dimension
    dof = n if spec.wishart_dof is None else spec.wishart_dof
    lo = np.broadcast_to(np.asarray(spec.mean_low, float), (n,))
    hi = np.broadcast_to(np.asarray(spec.mean_high, float), (n,))
    scale_chol = np.sqrt(spec.wishart_scale)
    weights = np.empty(spec.components)
    means = np.empty((spec.components, n))
    covs = np.empty((spec.components, n, n))
    for k in range(spec.components):
        rng = _component_rng(spec.seed, k)
        means[k] = rng.uniform(lo, hi)
        while True:
            w = rng.uniform(spec.weight_low, spec.weight_high)
            if w > 0:
                break
        weights[k] = w
        while True:
            X = scale_chol * rng.standard_normal((n, dof))
            S = X @ X.T
            eig = np.linalg.eigvalsh(S)
            if eig[0] > 1e-9 * eig.sum():
                break
        covs[k] = S
    return GaussianMixture(weights, means, covs, MixtureKind.LIKELIHOOD)
