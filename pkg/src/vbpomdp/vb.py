"""Variational lower bounds for Gaussian x softmax products.

A softmax class likelihood ``p(o=j|s)`` is replaced by an unnormalized
Gaussian ``f(s) = exp(g + h's - s'Ks/2) <= p(o=j|s)``.  The product of a
Gaussian prior with ``f`` is Gaussian again, with mass ``C_hat <= C``.  The
variational parameters are tuned by EM so that ``log C_hat`` increases
monotonically to a local maximum.

Two bound families are available:

``"pairwise"`` (default)
    ``p(j|s) >= prod_{c != j} sigmoid(x_j - x_c)`` with one Jaakkola-Jordan
    quadratic bound per competing class.  Exact for two classes at the
    touching points ``x_j - x_c = +-xi``.
``"bouchard"``
    ``log sum_c e^{x_c} <= alpha + sum_c log(1 + e^{x_c - alpha})`` with a
    Jaakkola-Jordan bound on each term and a shared shift ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _linalg
from .gm import GaussianComponent, GaussianMixture, MixtureKind
from .softmax import SoftmaxModel

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100
BOUNDS = ("pairwise", "bouchard")


class DegenerateBoundError(ArithmeticError):
    """The accumulated quadratic term lost positive semi-definiteness."""


def lambda_of_xi(xi):
    """``tanh(xi/2) / (4 xi)``, with the continuous limit 1/8 at zero."""
    xi = np.abs(np.asarray(xi, dtype=float))
    small = xi < 1e-4
    safe = np.where(small, 1.0, xi)
    out = np.where(small, 0.125 - xi * xi / 96.0, np.tanh(safe / 2.0) / (4.0 * safe))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class VariationalParams:
    xi: np.ndarray
    alpha: float = 0.0
    gamma: float = 0.0


@dataclass(frozen=True)
class VBResult:
    posterior: GaussianComponent
    log_mass: float
    iterations: int
    converged: bool
    params: VariationalParams
    trace: tuple = field(default=(), repr=False)

    @property
    def mass(self) -> float:
        return float(np.exp(self.log_mass))


def _bound_terms(bound, W, b, j, xi, alpha):
    """Quadratic-exponent coefficients ``(g, h, K)`` of the bound, batched.

    ``xi`` has shape ``(B, C)`` (unused columns ignored), ``alpha`` ``(B,)``.
    """
    lam = lambda_of_xi(xi)
    if bound == "pairwise":
        others = np.array([c for c in range(b.size) if c != j], dtype=int)
        U = W[j] - W[others]                      # (C-1, N)
        v = b[j] - b[others]                      # (C-1,)
        lam_o = lam[:, others]
        xi_o = xi[:, others]
        K = 2.0 * np.einsum("bc,ci,cj->bij", lam_o, U, U)
        h = (0.5 - 2.0 * lam_o * v) @ U
        log_sig = -np.logaddexp(0.0, -xi_o)
        g = (log_sig - 0.5 * xi_o + lam_o * xi_o ** 2 + 0.5 * v - lam_o * v ** 2).sum(axis=1)
        return g, h, K
    # bouchard: z_c = w_c's + (b_c - alpha)
    C = b.size
    shift = b[None, :] - alpha[:, None]           # (B, C)
    K = 2.0 * np.einsum("bc,ci,cj->bij", lam, W, W)
    h = W[j][None, :] - 0.5 * W.sum(axis=0)[None, :] - 2.0 * (lam * shift) @ W
    g = (b[j] - alpha
         - (0.5 * (shift - xi) + lam * (shift ** 2 - xi ** 2) + np.logaddexp(0.0, xi)).sum(axis=1))
    del C
    return g, h, K


def _posterior(mu0, S0, g, h, K):
    """Posterior moments and log mass of ``N(mu0, S0) * exp(g + h's - s'Ks/2)``.

    Written without inverting ``S0``: ``S = (I + S0 K)^-1 S0``.
    """
    n = mu0.shape[1]
    eye = np.eye(n)
    A = eye[None] + S0 @ K
    S = _linalg.symmetrize(np.linalg.solve(A, S0))
    hp = h - np.einsum("bij,bj->bi", K, mu0)
    mu = mu0 + np.einsum("bij,bj->bi", S, hp)
    sign, logdet_A = np.linalg.slogdet(A)
    log_mass = (g + np.einsum("bi,bi->b", h, mu0)
                - 0.5 * np.einsum("bi,bij,bj->b", mu0, K, mu0)
                - 0.5 * logdet_A
                + 0.5 * np.einsum("bi,bij,bj->b", hp, S, hp))
    return mu, S, log_mass


def _update_params(bound, W, b, j, mu, S, xi, alpha):
    """EM step: re-estimate the variational parameters from the posterior."""
    if bound == "pairwise":
        U = W[j][None, :] - W                     # row j is zero and ignored
        v = b[j] - b
        m = mu @ U.T + v                          # E[y_c]
        var = np.einsum("ci,bij,cj->bc", U, S, U)
        return np.sqrt(np.maximum(var + m * m, 0.0)), alpha
    x_mean = mu @ W.T + b                         # E[x_c]
    var = np.einsum("ci,bij,cj->bc", W, S, W)
    xi = np.sqrt(np.maximum(var + (x_mean - alpha[:, None]) ** 2, 0.0))
    lam = lambda_of_xi(xi)
    C = b.size
    alpha = (C / 2.0 - 1.0 + 2.0 * (lam * x_mean).sum(axis=1)) / (2.0 * lam.sum(axis=1))
    return xi, alpha


def _initial_params(bound, W, b, j, mu0, S0):
    B = mu0.shape[0]
    if bound == "pairwise":
        xi, _ = _update_params(bound, W, b, j, mu0, S0, None, np.zeros(B))
        return xi, np.zeros(B)
    alpha = mu0 @ W[j] + b[j]
    x_mean = mu0 @ W.T + b
    var = np.einsum("ci,bij,cj->bc", W, S0, W)
    xi = np.sqrt(var + (x_mean - alpha[:, None]) ** 2)
    return xi, alpha


def vb_batch(means, covs, model: SoftmaxModel, class_index: int, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, bound: str = "pairwise", keep_trace: bool = False):
    """Run the EM loop for a stack of Gaussian priors against one class.

    Each element is frozen once its ``|delta log C_hat| < tol`` so results do
    not depend on what else is in the batch.

    Returns
    -------
    dict with keys ``mean (B,N)``, ``cov (B,N,N)``, ``log_mass (B,)``,
    ``iterations (B,)``, ``converged (B,)``, ``xi (B,C)``, ``alpha (B,)`` and
    ``trace`` (list of per-element log-mass histories, when requested).
    """
    if bound not in BOUNDS:
        raise ValueError(f"unknown bound {bound!r}")
    mu0 = np.asarray(means, dtype=float)
    S0 = np.asarray(covs, dtype=float)
    B, n = mu0.shape
    if n != model.dimension:
        raise ValueError("prior dimension does not match the softmax model")
    j = int(class_index)
    if not 0 <= j < model.num_classes:
        raise IndexError(f"class index {j} out of range")
    W, b = model.weights, model.biases
    if model.num_classes == 1:
        return dict(mean=mu0.copy(), cov=S0.copy(), log_mass=np.zeros(B), iterations=np.zeros(B, int),
                    converged=np.ones(B, bool), xi=np.zeros((B, 1)), alpha=np.zeros(B),
                    trace=[[0.0] for _ in range(B)] if keep_trace else None)

    xi, alpha = _initial_params(bound, W, b, j, mu0, S0)
    g, h, K = _bound_terms(bound, W, b, j, xi, alpha)
    mu, S, logC = _posterior(mu0, S0, g, h, K)
    iterations = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    trace = [[float(v)] for v in logC] if keep_trace else None
    active = np.arange(B)
    for _ in range(max_iter):
        if active.size == 0:
            break
        xi_a, alpha_a = _update_params(bound, W, b, j, mu[active], S[active], xi[active], alpha[active])
        g, h, K = _bound_terms(bound, W, b, j, xi_a, alpha_a)
        if np.any(np.linalg.eigvalsh(K)[:, 0] < -1e-9 * (1.0 + np.abs(K).max())):
            raise DegenerateBoundError("quadratic bound term is not positive semi-definite")
        mu_a, S_a, logC_a = _posterior(mu0[active], S0[active], g, h, K)
        delta = logC_a - logC[active]
        xi[active], alpha[active] = xi_a, alpha_a
        mu[active], S[active], logC[active] = mu_a, S_a, logC_a
        iterations[active] += 1
        if keep_trace:
            for idx, v in zip(active, logC_a):
                trace[idx].append(float(v))
        done = np.abs(delta) < tol
        converged[active[done]] = True
        active = active[~done]
    return dict(mean=mu, cov=S, log_mass=logC, iterations=iterations, converged=converged,
                xi=xi, alpha=alpha, trace=trace)


def bound_value(model: SoftmaxModel, class_index: int, params: VariationalParams, states,
                bound: str = "pairwise") -> np.ndarray:
    """Evaluate the variational lower bound ``f(s) <= p(class|s)`` at states ``(P, N)``."""
    xi = np.asarray(params.xi, dtype=float)[None, :]
    alpha = np.array([params.alpha], dtype=float)
    g, h, K = _bound_terms(bound, model.weights, model.biases, class_index, xi, alpha)
    s = np.atleast_2d(np.asarray(states, dtype=float))
    return np.exp(g[0] + s @ h[0] - 0.5 * np.einsum("pi,ij,pj->p", s, K[0], s))


def vb_gaussian_product(prior: GaussianComponent, model: SoftmaxModel, class_index: int,
                        tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                        bound: str = "pairwise") -> VBResult:
    """Variational approximation of ``N(s|prior) * p(o=class|s)``.

    The prior's weight must be positive but is otherwise ignored: the result
    describes the normalized prior shape, ``N(s|mu0,S0) f(s) = C_hat N(s|mu,S)``.
    """
    if prior.weight <= 0:
        raise ValueError("prior weight must be positive")
    out = vb_batch(prior.mean[None], prior.cov[None], model, class_index, tol, max_iter, bound,
                   keep_trace=True)
    params = VariationalParams(xi=out["xi"][0], alpha=float(out["alpha"][0]),
                               gamma=float(out["alpha"][0]))
    return VBResult(
        posterior=GaussianComponent(1.0, out["mean"][0], out["cov"][0]),
        log_mass=float(out["log_mass"][0]),
        iterations=int(out["iterations"][0]),
        converged=bool(out["converged"][0]),
        params=params,
        trace=tuple(out["trace"][0]),
    )


def vb_class_products(mixture: GaussianMixture, model: SoftmaxModel, classes, tol=DEFAULT_TOL,
                      max_iter=DEFAULT_MAX_ITER, bound="pairwise"):
    """Per-class VB products of every mixand; returns ``{class: (w, mu, S)}``.

    Output weights are ``w_k * C_hat_kc``; negative input weights carry their
    sign through since ``C_hat`` only depends on the mixand shape.
    """
    out = {}
    for c in classes:
        res = vb_batch(mixture.means, mixture.covs, model, c, tol, max_iter, bound)
        out[c] = (mixture.weights * np.exp(res["log_mass"]), res["mean"], res["cov"])
    return out


def vb_mixture_product(mixture: GaussianMixture, model: SoftmaxModel, label: str,
                       tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                       bound: str = "pairwise") -> GaussianMixture:
    """Variational mixture approximating ``mixture(s) * p(o=label|s)``.

    One output component per (mixand, class of the label), ordered
    mixand-major.  The result is unnormalized (kind reward-or-alpha).
    """
    if mixture.kind is MixtureKind.LIKELIHOOD:
        raise ValueError("vb_mixture_product expects a belief or an alpha function")
    if label not in model.labels:
        raise KeyError(f"unknown observation label {label!r}")
    classes = model.labels[label]
    n = mixture.dimension
    prods = vb_class_products(mixture, model, classes, tol, max_iter, bound)
    w = np.stack([prods[c][0] for c in classes], axis=1).reshape(-1)
    mu = np.stack([prods[c][1] for c in classes], axis=1).reshape(-1, n)
    S = np.stack([prods[c][2] for c in classes], axis=1).reshape(-1, n, n)
    return GaussianMixture(w, mu, S, MixtureKind.REWARD, dimension=n, check=False)
