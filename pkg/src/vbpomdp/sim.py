"""Monte-Carlo episode runner, baseline policies and summary statistics."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .filtering import FilterConfig, ZeroMassError, predict, step
from .gm import GaussianMixture, inner_product
from .pbvi import PolicySet, policy_query
from .scenarios import Scenario

POLICY_KINDS = ("vb", "gmLikelihood", "greedy", "perfect")
CSV_HEADER = ["scenario", "policy", "episode", "seed", "totalReward", "caught", "stepsToCatch"]


@dataclass
class EpisodeResult:
    total_reward: float
    steps: int
    caught: bool
    steps_to_catch: int | None
    trajectory: list = field(default_factory=list)


@dataclass
class BatchResult:
    scenario: str
    policy: str
    seed: int
    episodes: list

    @property
    def rewards(self) -> np.ndarray:
        return np.array([e.total_reward for e in self.episodes], dtype=float)

    @property
    def summary(self) -> dict:
        return summarize(self.episodes)


# --------------------------------------------------------------------------
# environment


def env_step(scenario: Scenario, truth, action: str, rng: np.random.Generator):
    """Advance the truth, sample a label at the new state and score it.

    Returns ``(next_truth, label, reward)``.
    """
    truth = np.asarray(truth, dtype=float)
    if truth.size != scenario.truth_dim:
        raise ValueError(f"truth state must have {scenario.truth_dim} entries")
    k = scenario.space_dim
    cop, rob, vel = scenario.split(truth)
    rd = scenario.robber
    cop = cop + scenario.cop_moves[action] + math.sqrt(scenario.cop_noise[action]) * rng.standard_normal(k)
    rob_noise = math.sqrt(rd.position_noise) * rng.standard_normal(k)
    if rd.kind == "NCV":
        rob = rob + rd.dt * vel + rob_noise
        vel = vel + math.sqrt(rd.velocity_noise) * rng.standard_normal(k)
    else:
        rob = rob + rob_noise
    cop, rob = scenario._clamp(cop), scenario._clamp(rob)
    nxt = np.concatenate([cop, rob, vel] if rd.kind == "NCV" else [cop, rob])
    probs = scenario.sensor.label_probs(rob - cop)
    labels = list(probs)
    p = np.array([float(probs[lab]) for lab in labels])
    label = labels[int(rng.choice(len(labels), p=p / p.sum()))]
    reward = scenario.reward_rule(scenario.distance(nxt))
    return nxt, label, float(reward)


def baseline_action(kind: str, scenario: Scenario, belief: GaussianMixture | None, truth=None) -> str:
    """Greedy one-step or perfect-knowledge action.

    ``greedy`` maximizes ``<r_a, predict(belief, a)>`` with the action's own
    reward mixture.  ``perfect`` chases the true robber position.  Ties go
    to the first action in model order.
    """
    names = scenario.model.action_names
    if kind == "greedy":
        model = scenario.model
        vals = [inner_product(model.rewards[a], predict(belief, model, a)) for a in names]
        return names[int(np.argmax(vals))]
    if kind == "perfect":
        if truth is None:
            raise ValueError("the perfect-knowledge baseline needs the true state")
        cop, rob, _ = scenario.split(truth)
        dists = [np.linalg.norm(rob - (cop + scenario.cop_moves[a])) for a in names]
        return names[int(np.argmin(dists))]
    raise ValueError(f"unknown baseline {kind!r}")


# --------------------------------------------------------------------------
# episodes


def _belief_summary(belief: GaussianMixture) -> list:
    return belief.mean().tolist()


def run_episode(scenario: Scenario, policy_kind: str, policy: PolicySet | None, rng: np.random.Generator,
                filter_config: FilterConfig | None = None, record: bool = False) -> EpisodeResult:
    if policy_kind not in POLICY_KINDS:
        raise ValueError(f"policy kind must be one of {POLICY_KINDS}")
    if policy_kind in ("vb", "gmLikelihood") and policy is None:
        raise ValueError(f"policy kind {policy_kind!r} needs a policy")
    cfg = filter_config or FilterConfig()
    model = scenario.model
    if policy_kind == "gmLikelihood":
        if scenario.gm_model is None:
            raise ValueError(f"scenario {scenario.name!r} has no GM-likelihood model")
        model = scenario.gm_model
    axes = list(model.observed_axes)
    truth = scenario.sample_initial_truth(rng)
    belief = scenario.initial_belief
    total, caught, steps_to_catch, steps = 0.0, False, None, 0
    trajectory = []
    for t in range(scenario.episode_steps):
        if policy_kind in ("vb", "gmLikelihood"):
            action = policy_query(policy, belief)[0]
        else:
            action = baseline_action(policy_kind, scenario, belief, truth)
        truth, label, reward = env_step(scenario, truth, action, rng)
        observed = scenario.planner_state(truth)[axes] if axes else None
        try:
            belief = step(belief, model, action, label, cfg, observed)
        except ZeroMassError:
            belief = predict(belief, model, action)
        total += reward
        steps = t + 1
        if record:
            trajectory.append((truth.tolist(), _belief_summary(belief), action, label, reward))
        if scenario.capture_radius is not None and scenario.distance(truth) <= scenario.capture_radius:
            caught, steps_to_catch = True, steps
            break
    return EpisodeResult(total, steps, caught, steps_to_catch, trajectory)


def run_batch(scenario: Scenario, policy_kind: str, policy: PolicySet | None = None, episodes: int = 100,
              filter_config: FilterConfig | None = None, seed: int = 0, threads: int = 1,
              record: bool = False) -> BatchResult:
    """Run independent episodes; episode ``e`` uses the generator keyed by ``(seed, e)``."""
    if episodes < 0:
        raise ValueError("episodes must be nonnegative")

    def one(e):
        return run_episode(scenario, policy_kind, policy, np.random.default_rng([seed, e]), filter_config, record)

    if threads > 1 and episodes > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(episodes)))
    else:
        results = [one(e) for e in range(episodes)]
    return BatchResult(scenario.name, policy_kind, seed, results)


def summarize(results: Sequence[EpisodeResult]) -> dict:
    """Mean and sample std of rewards, capture percentage and mean steps to catch."""
    n = len(results)
    if n == 0:
        return {"episodes": 0, "mean": None, "std": None, "capture%": None, "meanStepsToCatch": None}
    r = np.array([e.total_reward for e in results], dtype=float)
    catches = [e.steps_to_catch for e in results if e.caught]
    return {
        "episodes": n,
        "mean": float(r.mean()),
        "std": float(r.std(ddof=1)) if n > 1 else 0.0,
        "capture%": 100.0 * len(catches) / n,
        "meanStepsToCatch": float(np.mean(catches)) if catches else None,
    }


# --------------------------------------------------------------------------
# statistics


def welch_ttest(sample_a, sample_b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 <= 0:
        raise ValueError("both samples have zero variance")
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    dof = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), dof)))
    return t, p


def capture_test(caught_a: int, n_a: int, caught_b: int, n_b: int) -> float:
    """One-sided Fisher exact p-value that capture rate A exceeds rate B."""
    if min(n_a, n_b) < 1 or not (0 <= caught_a <= n_a and 0 <= caught_b <= n_b):
        raise ValueError("invalid capture counts")
    table = [[caught_a, n_a - caught_a], [caught_b, n_b - caught_b]]
    return float(stats.fisher_exact(table, alternative="greater")[1])


def pooled_se(sample_a, sample_b) -> float:
    """Standard error of the difference of two sample means."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    return math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)


# --------------------------------------------------------------------------
# output


def write_batch_csv(path, batches: Sequence[BatchResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for batch in batches:
            for i, e in enumerate(batch.episodes):
                w.writerow([batch.scenario, batch.policy, i, batch.seed, repr(float(e.total_reward)),
                            int(e.caught), "" if e.steps_to_catch is None else e.steps_to_catch])


def write_trajectory_csv(path, batch: BatchResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "step", "truth", "beliefMean", "action", "label", "reward"])
        for i, e in enumerate(batch.episodes):
            for t, (truth, mean, action, label, reward) in enumerate(e.trajectory):
                w.writerow([i, t + 1, " ".join(map(repr, truth)), " ".join(map(repr, mean)), action, label,
                            repr(reward)])


def comparison_table(batches: Sequence[BatchResult]) -> list[dict]:
    """Pairwise Welch tests (and capture tests when any episode was caught)."""
    out = []
    for i, a in enumerate(batches):
        for b in batches[i + 1:]:
            row = {"a": a.policy, "b": b.policy}
            if len(a.episodes) >= 2 and len(b.episodes) >= 2:
                try:
                    row["t"], row["p"] = welch_ttest(a.rewards, b.rewards)
                except ValueError:
                    row["t"], row["p"] = None, None
            ca = sum(e.caught for e in a.episodes)
            cb = sum(e.caught for e in b.episodes)
            if (ca or cb) and a.episodes and b.episodes:
                row["captureP"] = capture_test(ca, len(a.episodes), cb, len(b.episodes))
            out.append(row)
    return out


def write_summary_json(path, batches: Sequence[BatchResult]) -> None:
    data = {
        "summaries": [{"scenario": b.scenario, "policy": b.policy, "seed": b.seed, **b.summary} for b in batches],
        "comparisons": comparison_table(batches),
    }
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
