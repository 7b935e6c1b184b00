"""Gaussian-mixture point-based value iteration.

Alpha functions are unnormalized Gaussian mixtures; the value of a belief is
``max_i <alpha_i, b>``.  Each round builds the intermediate functions

    alpha_{a,o}^i(s) = int alpha^i(s') p(o|s') N(s' | F s + d_a, Q_a) ds'

once for all beliefs, then backs up every belief point.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import _linalg
from .condense import CondenseConfig, condense
from .filtering import FilterConfig, ZeroMassError, predict, step
from .gm import GaussianComponent, GaussianMixture, MixtureKind, concat, product_mixture
from .model import CPOMDPModel
from .vb import DEFAULT_MAX_ITER, DEFAULT_TOL, vb_batch


@dataclass(frozen=True)
class AlphaFunction:
    gm: GaussianMixture
    action: str


@dataclass(frozen=True)
class PolicySet:
    """Alpha functions of a horizon-``horizon`` value function."""

    alphas: tuple
    horizon: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(self.alphas))

    def __len__(self):
        return len(self.alphas)

    @property
    def dimension(self) -> int:
        return self.alphas[0].gm.dimension

    def values(self, belief: GaussianMixture) -> np.ndarray:
        """``<alpha_i, belief>`` for every alpha."""
        return alpha_values([a.gm for a in self.alphas], [belief])[:, 0]

    def to_json_dict(self) -> dict:
        return {"horizon": self.horizon,
                "alphas": [{"action": a.action, "gm": a.gm.to_json_dict()} for a in self.alphas]}

    @classmethod
    def from_json_dict(cls, data: dict) -> "PolicySet":
        alphas = [AlphaFunction(GaussianMixture.from_json_dict(a["gm"]), str(a["action"]))
                  for a in data["alphas"]]
        return cls(tuple(alphas), int(data.get("horizon", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "PolicySet":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SolverConfig:
    """Settings for :func:`solve`.

    Parameters
    ----------
    alpha_condense : CondenseConfig
        Size budget for intermediate and backed-up alpha functions.
    skip_lti : bool
        Use the identity-dynamics backup (no transform by ``F``).  Only valid
        when ``F = I``; kept for cross-checking the general path.
    retain : bool
        Keep the previous best alpha at a belief when the new backup does not
        improve its value, so training-belief values never decrease.
    normalize_masses : bool
        Rescale each alpha component's variational class masses so they sum
        to one over all classes, as the exact class probabilities do.  The raw
        lower bounds lose mass for broad components, which acts as an extra
        discount at every backup.
    threads : int
        Worker threads for per-entry condensation.
    """

    alpha_condense: CondenseConfig = field(
        default_factory=lambda: CondenseConfig(target_size=60, cluster_count=6, max_cluster_size=150))
    vb_tol: float = DEFAULT_TOL
    vb_max_iter: int = DEFAULT_MAX_ITER
    vb_bound: str = "pairwise"
    skip_lti: bool = False
    retain: bool = True
    dedupe_tol: float = 1e-9
    normalize_masses: bool = False
    threads: int = 1


# --------------------------------------------------------------------------
# LTI transform


def lti_arrays(w, mu, S, F_inv, omega):
    """``N(F s | mu, S)`` as ``(1/omega) N(s | F^-1 mu, F^-1 S F^-T)``."""
    mu_s = mu @ F_inv.T
    S_s = _linalg.symmetrize(F_inv @ S @ F_inv.T)
    return w / omega, mu_s, S_s


def lti_transform(component: GaussianComponent, F) -> GaussianComponent:
    """Rewrite a Gaussian in ``F s`` as a weighted Gaussian in ``s``.

    The weight is divided by ``omega = |det F|``.
    """
    F = np.asarray(F, dtype=float)
    det = np.linalg.det(F)
    if abs(det) <= 1e-12:
        raise np.linalg.LinAlgError("transition matrix is singular")
    w, mu, S = lti_arrays(np.array([component.weight]), component.mean[None], component.cov[None],
                          np.linalg.inv(F), abs(det))
    return GaussianComponent(float(w[0]), mu[0], S[0])


# --------------------------------------------------------------------------
# values


def alpha_values(mixtures: Sequence[GaussianMixture], beliefs: Sequence[GaussianMixture]) -> np.ndarray:
    """Matrix of inner products ``<mixtures[i], beliefs[j]>``."""
    A, B = len(mixtures), len(beliefs)
    out = np.zeros((A, B))
    if A == 0 or B == 0:
        return out
    fa = concat(list(mixtures))
    fb = concat(list(beliefs))
    if fa.size == 0 or fb.size == 0:
        return out
    ia = np.repeat(np.arange(A), [m.size for m in mixtures])
    ib = np.repeat(np.arange(B), [b.size for b in beliefs])
    onehot_b = (ib[:, None] == np.arange(B)[None, :]).astype(float)
    rows = max(1, _linalg.PAIR_CHUNK // fb.size)
    for lo in range(0, fa.size, rows):
        hi = min(fa.size, lo + rows)
        ov = np.exp(_linalg.pairwise_log_overlap(fa.means[lo:hi], fa.covs[lo:hi], fb.means, fb.covs))
        ov *= fa.weights[lo:hi, None]
        per_b = ov @ (onehot_b * fb.weights[:, None])
        # component rows are contiguous per mixture
        seg = ia[lo:hi]
        starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
        out[seg[starts]] += np.add.reduceat(per_b, starts, axis=0)
    return out


def policy_query(policy: PolicySet, belief: GaussianMixture) -> tuple[str, float]:
    """Action of the maximizing alpha and its value; ties go to the lowest index."""
    if len(policy) == 0:
        raise ValueError("empty policy")
    if belief.dimension != policy.dimension:
        raise ValueError("belief dimension does not match the policy")
    v = policy.values(belief)
    i = int(np.argmax(v))
    return policy.alphas[i].action, float(v[i])


# --------------------------------------------------------------------------
# intermediate alphas


def _transition_arrays(model: CPOMDPModel, action, w, mu, S, skip_lti):
    """Convolve with the action's transition and rewrite as a function of s."""
    mu = mu - action.displacement
    S = S + action.noise
    if skip_lti:
        return w, mu, S
    return lti_arrays(w, mu, S, model.transition_inv, model.omega)


def _observation_products(alpha: GaussianMixture, model: CPOMDPModel, config: SolverConfig):
    """``alpha(s') p(o|s')`` per label, before dynamics; weights, means, covs."""
    out = {}
    n = alpha.dimension
    if model.is_softmax:
        sm = model.observation
        results = [vb_batch(alpha.means, alpha.covs, sm, c, config.vb_tol, config.vb_max_iter, config.vb_bound)
                   for c in range(sm.num_classes)]
        log_mass = np.stack([r["log_mass"] for r in results])
        if config.normalize_masses:
            log_mass = log_mass - logsumexp(log_mass, axis=0)
        per_class = {c: (alpha.weights * np.exp(log_mass[c]), r["mean"], r["cov"])
                     for c, r in enumerate(results)}
        for label, classes in sm.labels.items():
            w = np.stack([per_class[c][0] for c in classes], axis=1).reshape(-1)
            mu = np.stack([per_class[c][1] for c in classes], axis=1).reshape(-1, n)
            S = np.stack([per_class[c][2] for c in classes], axis=1).reshape(-1, n, n)
            out[label] = (w, mu, S)
    else:
        for label, lik in model.observation.items():
            p = product_mixture(alpha, lik)
            out[label] = (p.weights, p.means, p.covs)
    return out


def intermediate_alphas(policy: PolicySet, model: CPOMDPModel, config: SolverConfig | None = None,
                        condense_entries: bool = True) -> dict:
    """Table ``{(alpha_index, action, label): GaussianMixture}``.

    Softmax mode multiplies each alpha by every class of the label through the
    variational bound (computed once per alpha and class, reused across
    actions); GM-likelihood mode forms the exact product.  Each entry is then
    convolved with the action's transition, rewritten in the pre-transition
    state, and condensed to the alpha budget.
    """
    config = config or SolverConfig()
    if len(policy) == 0:
        raise ValueError("policy is empty")
    if config.skip_lti and not model.identity_transition:
        raise ValueError("skip_lti is only valid for an identity transition")
    n = model.dimension
    jobs = []
    for i, alpha in enumerate(policy.alphas):
        prods = _observation_products(alpha.gm, model, config)
        for action in model.actions:
            for label in model.labels:
                w, mu, S = prods[label]
                w, mu, S = _transition_arrays(model, action, w, mu, S, config.skip_lti)
                jobs.append(((i, action.name, label), GaussianMixture(w, mu, S, MixtureKind.REWARD,
                                                                      dimension=n, check=False)))
    if not condense_entries:
        return dict(jobs)
    cfg = config.alpha_condense
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            reduced = list(pool.map(lambda job: condense(job[1], cfg), jobs))
    else:
        reduced = [condense(g, cfg) for _, g in jobs]
    return {key: g for (key, _), g in zip(jobs, reduced)}


# --------------------------------------------------------------------------
# backups


def _best_candidates(beliefs, intermediates, model: CPOMDPModel, n_alphas: int):
    """Per belief: value, action and chosen intermediate index per label."""
    actions = model.action_names
    labels = model.labels
    keys = [(i, a, l) for a in actions for l in labels for i in range(n_alphas)]
    vals = alpha_values([intermediates[k] for k in keys], beliefs)
    vals = vals.reshape(len(actions), len(labels), n_alphas, len(beliefs))
    rvals = alpha_values([model.rewards[a] for a in actions], beliefs)
    choice = np.argmax(vals, axis=2)                       # (A, L, B)
    best = np.take_along_axis(vals, choice[:, :, None, :], axis=2)[:, :, 0, :]
    total = rvals + model.discount * best.sum(axis=1)      # (A, B)
    a_star = np.argmax(total, axis=0)
    return total, a_star, choice


def _candidate(model: CPOMDPModel, intermediates, action: str, chosen) -> GaussianMixture:
    parts = [model.rewards[action]]
    for label, i in zip(model.labels, chosen):
        parts.append(intermediates[(int(i), action, label)].scaled(model.discount))
    return concat(parts)


def backup(belief: GaussianMixture, intermediates: dict, model: CPOMDPModel,
           config: SolverConfig | None = None, condense_result: bool = True) -> AlphaFunction:
    """Bellman backup at one belief.

    For each action the best intermediate per label is selected and summed
    with the action's reward; the candidate with the highest value wins.
    """
    if not intermediates:
        raise ValueError("intermediate table is empty")
    n_alphas = 1 + max(k[0] for k in intermediates)
    total, a_star, choice = _best_candidates([belief], intermediates, model, n_alphas)
    ai = int(a_star[0])
    action = model.action_names[ai]
    gm = _candidate(model, intermediates, action, choice[ai, :, 0])
    if condense_result:
        gm = condense(gm, (config or SolverConfig()).alpha_condense)
    return AlphaFunction(gm, action)


def _same_alpha(x: AlphaFunction, y: AlphaFunction, tol: float) -> bool:
    if x.action != y.action or x.gm.size != y.gm.size:
        return False
    return (np.allclose(x.gm.weights, y.gm.weights, rtol=0, atol=tol)
            and np.allclose(x.gm.means, y.gm.means, rtol=0, atol=tol)
            and np.allclose(x.gm.covs, y.gm.covs, rtol=0, atol=tol))


def dedupe(alphas: Sequence[AlphaFunction], tol: float = 1e-9) -> list[AlphaFunction]:
    out = []
    for a in alphas:
        if not any(_same_alpha(a, b, tol) for b in out):
            out.append(a)
    return out


def initial_policy(model: CPOMDPModel) -> PolicySet:
    """Horizon-0 policy: one alpha per action equal to its reward."""
    return PolicySet(tuple(AlphaFunction(model.rewards[a], a) for a in model.action_names), 0)


def backup_round(policy: PolicySet, model: CPOMDPModel, beliefs: Sequence[GaussianMixture],
                 config: SolverConfig) -> tuple[PolicySet, np.ndarray]:
    """One PBVI round; returns the new policy and its values at the beliefs."""
    table = intermediate_alphas(policy, model, config)
    total, a_star, choice = _best_candidates(beliefs, table, model, len(policy))
    cfg = config.alpha_condense
    picks = []
    for b in range(len(beliefs)):
        ai = int(a_star[b])
        action = model.action_names[ai]
        picks.append((action, choice[ai, :, b]))
    # beliefs picking the same candidate share one condensation
    unique = {}
    for action, chosen in picks:
        unique.setdefault((action, tuple(int(c) for c in chosen)), None)
    keys = list(unique)
    cands = [_candidate(model, table, a, c) for a, c in keys]
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            reduced = list(pool.map(lambda g: condense(g, cfg), cands))
    else:
        reduced = [condense(g, cfg) for g in cands]
    built = {k: AlphaFunction(g, k[0]) for k, g in zip(keys, reduced)}
    new = [built[(a, tuple(int(c) for c in chosen))] for a, chosen in picks]

    if config.retain:
        old_vals = alpha_values([a.gm for a in policy.alphas], beliefs)
        new_vals = alpha_values([a.gm for a in new], beliefs)
        for b in range(len(beliefs)):
            i_old = int(np.argmax(old_vals[:, b]))
            if old_vals[i_old, b] > new_vals[b, b]:
                new[b] = policy.alphas[i_old]
    alphas = dedupe(new, config.dedupe_tol)
    out = PolicySet(tuple(alphas), policy.horizon + 1)
    vals = alpha_values([a.gm for a in alphas], beliefs).max(axis=0)
    return out, vals


def solve(model: CPOMDPModel, beliefs: Sequence[GaussianMixture], rounds: int,
          config: SolverConfig | None = None, initial: PolicySet | None = None,
          on_round: Callable | None = None) -> PolicySet:
    """Run ``rounds`` PBVI backup rounds over a fixed belief set.

    ``on_round(round, policy, values, millis)`` is called after every round,
    with ``values`` the per-belief value of the new policy.
    """
    config = config or SolverConfig()
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    beliefs = list(beliefs)
    if not beliefs:
        raise ValueError("belief set is empty")
    policy = initial or initial_policy(model)
    for r in range(1, rounds + 1):
        t0 = time.perf_counter()
        policy, vals = backup_round(policy, model, beliefs, config)
        if on_round is not None:
            on_round(r, policy, vals, 1000.0 * (time.perf_counter() - t0))
    return policy


# --------------------------------------------------------------------------
# belief sampling


def sample_label(model: CPOMDPModel, state, rng: np.random.Generator) -> str:
    probs = model.label_probs(state)
    labels = list(probs)
    p = np.array([probs[k] for k in labels])
    return labels[int(rng.choice(len(labels), p=p / p.sum()))]


def generate_beliefs(model: CPOMDPModel, initial: GaussianMixture, count: int, max_depth: int,
                     seed: int = 0, filter_config: FilterConfig | None = None) -> list[GaussianMixture]:
    """Sample reachable beliefs by simulating random actions from ``initial``.

    Belief ``k`` uses its own generator keyed by ``(seed, k)``: a state is
    drawn from ``initial`` and pushed through random actions for a uniform
    depth in ``[0, max_depth]``, and the belief follows the sampled labels.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    cfg = filter_config or FilterConfig()
    out = []
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        depth = int(rng.integers(0, max_depth + 1))
        belief = initial
        state = initial.sample(rng)[0]
        for _ in range(depth):
            action = model.actions[int(rng.integers(len(model.actions)))]
            noise = np.linalg.cholesky(action.noise) @ rng.standard_normal(model.dimension)
            state = model.transition @ state + action.displacement + noise
            label = sample_label(model, state, rng)
            observed = state[list(model.observed_axes)] if model.observed_axes else None
            try:
                belief = step(belief, model, action, label, cfg, observed)
            except ZeroMassError:
                belief = predict(belief, model, action)
        out.append(belief)
    return out
