"""Gauss-sum Bayes filter with softmax (variational) or GM-likelihood updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _linalg
from .condense import CondenseConfig, condense
from .gm import GaussianMixture, MixtureKind, product_mixture
from .model import CPOMDPModel
from .vb import DEFAULT_MAX_ITER, DEFAULT_TOL, vb_batch

ZERO_MASS = 1e-300


class ZeroMassError(ArithmeticError):
    """The observation is incompatible with every belief component."""


@dataclass(frozen=True)
class FilterConfig:
    """Settings for belief updates.

    ``observed_noise`` is the variance used when conditioning on directly
    measured state axes.
    """

    condense: CondenseConfig = field(default_factory=lambda: CondenseConfig(target_size=20, cluster_count=4))
    vb_tol: float = DEFAULT_TOL
    vb_max_iter: int = DEFAULT_MAX_ITER
    vb_bound: str = "pairwise"
    observed_noise: float = 1e-4


def _as_belief(w, mu, S, n):
    return GaussianMixture(w, mu, S, MixtureKind.BELIEF, dimension=n, check=False)


def _normalize_log(logw, mu, S, n):
    total = logsumexp(logw)
    if not np.isfinite(total) or total < np.log(ZERO_MASS):
        raise ZeroMassError("posterior mass vanished; the observation contradicts the belief")
    w = np.exp(logw - total)
    keep = w > 0
    w = w[keep] / w[keep].sum()
    return _as_belief(w, mu[keep], S[keep], n), float(total)


def predict(belief: GaussianMixture, model: CPOMDPModel, action) -> GaussianMixture:
    """Push every component through ``s' = F s + displacement + noise``."""
    a = action if not isinstance(action, str) else model.action(action)
    F = model.transition
    mu = belief.means @ F.T + a.displacement
    S = F @ belief.covs @ F.T + a.noise
    return GaussianMixture(belief.weights, mu, _linalg.symmetrize(S), belief.kind,
                           dimension=belief.dimension, check=False)


def update_with_mass(belief: GaussianMixture, model: CPOMDPModel, label: str,
                     config: FilterConfig = FilterConfig()) -> tuple[GaussianMixture, float]:
    """Measurement update; returns the posterior and ``log`` of its mass."""
    n = belief.dimension
    if label not in model.labels:
        raise KeyError(f"unknown observation label {label!r}")
    if model.is_softmax:
        classes = model.observation.labels[label]
        logw, mus, covs = [], [], []
        base = np.log(belief.weights)
        for c in classes:
            res = vb_batch(belief.means, belief.covs, model.observation, c, config.vb_tol,
                           config.vb_max_iter, config.vb_bound)
            logw.append(base + res["log_mass"])
            mus.append(res["mean"])
            covs.append(res["cov"])
        logw = np.stack(logw, axis=1).reshape(-1)
        mu = np.stack(mus, axis=1).reshape(-1, n)
        S = np.stack(covs, axis=1).reshape(-1, n, n)
    else:
        prod = product_mixture(belief, model.observation[label])
        with np.errstate(divide="ignore"):
            logw = np.log(prod.weights)
        mu, S = prod.means, prod.covs
    post, logmass = _normalize_log(logw, mu, S, n)
    return condense_belief(post, config.condense), logmass


def update(belief: GaussianMixture, model: CPOMDPModel, label: str,
           config: FilterConfig = FilterConfig()) -> GaussianMixture:
    """Bayes measurement update for an observation label, then condensation."""
    return update_with_mass(belief, model, label, config)[0]


def condense_belief(belief: GaussianMixture, config: CondenseConfig | None) -> GaussianMixture:
    out = condense(belief, config)
    if out is belief:
        return belief
    return _as_belief(out.weights / out.weights.sum(), out.means, out.covs, belief.dimension)


def condition_observed(belief: GaussianMixture, axes, values, noise: float = 1e-4) -> GaussianMixture:
    """Kalman-condition each component on direct measurements of some axes.

    Component weights are reweighted by the measurement likelihood.
    """
    axes = list(axes)
    if not axes:
        return belief
    z = np.asarray(values, dtype=float).reshape(-1)
    H = np.zeros((len(axes), belief.dimension))
    H[np.arange(len(axes)), axes] = 1.0
    mu, S = belief.means, belief.covs
    R = noise * np.eye(len(axes))
    Sy = H @ S @ H.T + R
    resid = z - mu @ H.T
    gain = S @ H.T @ np.linalg.inv(Sy)
    mu_new = mu + np.einsum("kij,kj->ki", gain, resid)
    S_new = _linalg.symmetrize(S - gain @ H @ S)
    logw = np.log(belief.weights) + _linalg.gauss_logpdf(resid, Sy)
    return _normalize_log(logw, mu_new, S_new, belief.dimension)[0]


def step(belief: GaussianMixture, model: CPOMDPModel, action, label: str,
         config: FilterConfig = FilterConfig(), observed=None) -> GaussianMixture:
    """Predict, update and (optionally) condition on directly observed axes.

    Raises :class:`ZeroMassError` when the update has no support; callers may
    fall back to the prediction.
    """
    pred = predict(belief, model, action)
    post = update(pred, model, label, config)
    if observed is not None and model.observed_axes:
        post = condition_observed(post, model.observed_axes, observed, config.observed_noise)
    return post
