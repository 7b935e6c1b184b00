"""Built-in cop/robber target-search scenarios.

The environment simulates a cop and a robber in ``k`` spatial dimensions
(``k = 1`` for the colinear problem, ``2`` otherwise).  The planner works on
its own state: ``[cop, rob]`` for the colinear problem, the difference
``rob - cop`` for the planar search problems, and ``[rob - cop, rob velocity]``
for the nearly-constant-velocity planner.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.optimize import lsq_linear, nnls

from .gm import GaussianMixture, MixtureKind
from .model import Action, CPOMDPModel
from .softmax import SoftmaxModel, build_relative_model, linear_embed, merge_labels, pad_dimensions

PLANNER_KINDS = ("colinear", "difference", "difference-velocity")
ROBBER_KINDS = ("NCP", "NCV")


@dataclass(frozen=True)
class RewardRule:
    """``inside`` when the cop is within ``radius`` of the robber, else ``outside``."""

    radius: float
    inside: float
    outside: float

    def __call__(self, distance: float) -> float:
        return self.inside if distance <= self.radius else self.outside


@dataclass(frozen=True)
class RobberDynamics:
    """Robber motion used by the environment.

    NCP: ``rob += N(0, position_noise I)``.  NCV: ``rob += vel dt +
    N(0, position_noise I)`` and ``vel += N(0, velocity_noise I)``.
    """

    kind: str = "NCP"
    position_noise: float = 1.0
    velocity_noise: float = 0.0
    initial_velocity_std: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        if self.kind not in ROBBER_KINDS:
            raise ValueError(f"robber dynamics must be one of {ROBBER_KINDS}")


@dataclass(frozen=True)
class Scenario:
    """A complete target-search experiment.

    Attributes
    ----------
    name : str
    model : CPOMDPModel
        Planner model with the softmax observation model.
    initial_belief : GaussianMixture
        Planner-state belief at the start of every episode.
    sensor : SoftmaxModel
        True sensor over the relative position ``rob - cop`` (``k`` dims).
    planner : str
        How truth maps to planner state, one of :data:`PLANNER_KINDS`.
    robber : RobberDynamics
    cop_moves : mapping of action name to displacement (``k``,)
    cop_noise : mapping of action name to variance of the cop's motion noise
    cop_start : initial cop position (``k``,)
    reward_rule : RewardRule
    state_reward : GaussianMixture
        Reward as a function of the planner state, before any action shift.
    episode_steps : int
    capture_radius : float or None
        When set, an episode ends at the first step within this radius.
    bounds : (low, high) or None
        Truth positions are clamped to this box after every step.
    gm_model : CPOMDPModel or None
        Same problem with GM observation likelihoods.
    """

    name: str
    model: CPOMDPModel
    initial_belief: GaussianMixture
    sensor: SoftmaxModel
    planner: str
    robber: RobberDynamics
    cop_moves: Mapping[str, np.ndarray]
    cop_noise: Mapping[str, float]
    cop_start: np.ndarray
    reward_rule: RewardRule
    state_reward: GaussianMixture
    episode_steps: int = 100
    capture_radius: float | None = None
    bounds: tuple | None = None
    gm_model: CPOMDPModel | None = None

    def __post_init__(self):
        if self.planner not in PLANNER_KINDS:
            raise ValueError(f"planner kind must be one of {PLANNER_KINDS}")
        if self.episode_steps < 1:
            raise ValueError("episode_steps must be at least 1")
        if set(self.cop_moves) != set(self.model.action_names):
            raise ValueError("cop moves must cover the model's actions")
        expected = {"colinear": 2 * self.space_dim, "difference": self.space_dim,
                    "difference-velocity": 2 * self.space_dim}[self.planner]
        if self.model.dimension != expected:
            raise ValueError(f"{self.planner} planner needs a {expected}-D model")

    @property
    def space_dim(self) -> int:
        return self.sensor.dimension

    @property
    def truth_dim(self) -> int:
        k = self.space_dim
        return 3 * k if self.robber.kind == "NCV" else 2 * k

    def split(self, truth):
        k = self.space_dim
        truth = np.asarray(truth, dtype=float)
        vel = truth[2 * k:3 * k] if truth.size == 3 * k else np.zeros(k)
        return truth[:k], truth[k:2 * k], vel

    def planner_state(self, truth) -> np.ndarray:
        cop, rob, vel = self.split(truth)
        if self.planner == "colinear":
            return np.concatenate([cop, rob])
        if self.planner == "difference":
            return rob - cop
        return np.concatenate([rob - cop, vel])

    def distance(self, truth) -> float:
        cop, rob, _ = self.split(truth)
        return float(np.linalg.norm(rob - cop))

    def sample_initial_truth(self, rng: np.random.Generator) -> np.ndarray:
        """Draw the robber from the initial belief; the cop starts at ``cop_start``."""
        k = self.space_dim
        s = self.initial_belief.sample(rng)[0]
        cop = np.asarray(self.cop_start, dtype=float)
        if self.planner == "colinear":
            rob = s[k:2 * k]
        else:
            rob = cop + s[:k]
        rob = self._clamp(rob)
        parts = [cop, rob]
        if self.robber.kind == "NCV":
            parts.append(self.robber.initial_velocity_std * rng.standard_normal(k))
        return np.concatenate(parts)

    def _clamp(self, x):
        if self.bounds is None:
            return x
        lo, hi = self.bounds
        return np.clip(x, lo, hi)

    def with_robber(self, robber: RobberDynamics, name: str | None = None) -> "Scenario":
        return replace(self, robber=robber, name=name or self.name)


# --------------------------------------------------------------------------
# GM fits used by the built-ins


def _rotated_cov(along: float, across: float) -> np.ndarray:
    """Covariance with variance ``along`` on the (1,1) diagonal, ``across`` off it."""
    R = np.array([[1.0, -1.0], [1.0, 1.0]]) / np.sqrt(2.0)
    return R @ np.diag([along, across]) @ R.T


def _band_basis(offsets, offset_var, tiles, tile_var):
    """Gaussians at ``cop = u - d/2, rob = u + d/2`` for tile ``u`` and offset ``d``.

    The variance of ``d = rob - cop`` is ``offset_var`` and of ``u`` is
    ``tile_var``.
    """
    means, covs = [], []
    # var(u) = along/2 and var(d) = 2 across for the rotated frame
    cov = _rotated_cov(2.0 * tile_var, offset_var / 2.0)
    for u in tiles:
        for d in offsets:
            means.append([u - d / 2.0, u + d / 2.0])
            covs.append(cov)
    return np.array(means), np.array(covs)


def _design(points, means, covs):
    from ._linalg import gauss_logpdf
    return np.exp(gauss_logpdf(points[:, None, :] - means[None], covs[None]))


def _box_grid(low, high, count):
    g = np.linspace(low, high, count)
    X, Y = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def colinear_reward_gm(inside=3.0, outside=-1.0, radius=0.5, low=0.0, high=5.0) -> GaussianMixture:
    """Least-squares GM fit of the colinear reward over the bounded box."""
    pad = 0.1 * (high - low)
    band_tiles = np.linspace(low - pad, high + pad, 8)
    m_band, c_band = _band_basis([0.0], 0.3 ** 2, band_tiles, 0.5 ** 2)
    span = high - low
    m_wide, c_wide = _band_basis(np.linspace(-span, span, 3), 2.5 ** 2,
                                 np.linspace(low - 0.2 * span, high + 0.2 * span, 4), 1.2 ** 2)
    means = np.concatenate([m_band, m_wide])
    covs = np.concatenate([c_band, c_wide])
    pts = _box_grid(low, high, 41)
    d = pts[:, 1] - pts[:, 0]
    target = np.where(np.abs(d) <= radius, inside, outside)
    w = lsq_linear(_design(pts, means, covs), target, bounds=(-60.0, 60.0)).x
    return GaussianMixture(w, means, covs, MixtureKind.REWARD)


def colinear_gm_likelihoods(sensor: SoftmaxModel, low=0.0, high=5.0) -> dict[str, GaussianMixture]:
    """Nonnegative GM fits of the colinear detector's label probabilities.

    The fit is over the bounded box, with components elongated along the
    ``cop = rob`` diagonal because the sensor only depends on ``rob - cop``.
    """
    pts = _box_grid(low, high, 36)
    d = (pts[:, 1] - pts[:, 0])[:, None]
    probs = sensor.label_probs(d)
    pad = 0.1 * (high - low)
    tiles = np.linspace(low - pad, high + pad, 5)
    far = np.linspace(0.9, high - low + pad, 6)
    bases = {
        "Detect": _band_basis([-0.2, 0.2], 0.35 ** 2, tiles, 0.8 ** 2),
        "No Detect": _band_basis(np.r_[-far[::-1], far], 0.45 ** 2, tiles, 0.8 ** 2),
    }
    out = {}
    for label, (means, covs) in bases.items():
        w, _ = nnls(_design(pts, means, covs), probs[label])
        keep = w > 1e-10
        out[label] = GaussianMixture(w[keep], means[keep], covs[keep], MixtureKind.LIKELIHOOD)
    return out


def _shifted(reward: GaussianMixture, displacement) -> GaussianMixture:
    """``r(s + displacement)`` as a mixture in ``s``."""
    return GaussianMixture(reward.weights, reward.means - displacement, reward.covs, MixtureKind.REWARD,
                           check=False)


def _uniform_gm(centers, var) -> GaussianMixture:
    centers = np.atleast_2d(centers)
    n = centers.shape[1]
    w = np.full(len(centers), 1.0 / len(centers))
    return GaussianMixture(w, centers, np.repeat(var * np.eye(n)[None], len(centers), axis=0),
                           MixtureKind.BELIEF)


# --------------------------------------------------------------------------
# built-ins

CARDINAL = {"East": (1.0, 0.0), "West": (-1.0, 0.0), "North": (0.0, 1.0), "South": (0.0, -1.0),
            "Stay": (0.0, 0.0)}
STAY_NOISE = 1e-4


def colinear(discount: float = 0.95) -> Scenario:
    moves = {"left": np.array([-0.5]), "right": np.array([0.5]), "stay": np.array([0.0])}
    noise = {"left": 0.01, "right": 0.01, "stay": STAY_NOISE}
    rob_var = 0.5
    sensor = build_relative_model("detect_nodetect3", scale=0.5)
    observation = linear_embed(sensor, [[-1.0, 1.0]])
    actions = [Action(a, [moves[a][0], 0.0], np.diag([noise[a], rob_var])) for a in moves]
    reward = colinear_reward_gm()
    rewards = {a.name: _shifted(reward, a.displacement) for a in actions}
    cop0 = 2.5
    rob_centers = np.linspace(0.5, 4.5, 5)
    belief = GaussianMixture(np.full(5, 0.2), np.column_stack([np.full(5, cop0), rob_centers]),
                             np.repeat(np.diag([1e-3, 0.8])[None], 5, axis=0), MixtureKind.BELIEF)
    model = CPOMDPModel(actions, rewards, observation, discount=discount, observed_axes=(0,))
    gm_model = model.replace(observation=colinear_gm_likelihoods(sensor))
    return Scenario(
        name="colinear", model=model, initial_belief=belief, sensor=sensor, planner="colinear",
        robber=RobberDynamics("NCP", rob_var), cop_moves=moves, cop_noise=noise,
        cop_start=np.array([cop0]), reward_rule=RewardRule(0.5, 3.0, -1.0), state_reward=reward,
        bounds=(0.0, 5.0), gm_model=gm_model)


def _planar_parts(rob_var: float, sensor: SoftmaxModel):
    moves = {a: np.array(v) for a, v in CARDINAL.items()}
    noise = {a: (STAY_NOISE if a == "Stay" else 0.01) for a in moves}
    reward = GaussianMixture([10.0], [[0.0, 0.0]], [np.eye(2)], MixtureKind.REWARD)
    return moves, noise, reward


def _search_belief(spread: float = 4.0, var: float = 3.0) -> GaussianMixture:
    g = np.linspace(-spread, spread, 3)
    centers = np.array([[x, y] for x in g for y in g])
    return _uniform_gm(centers, var)


def search2d(rob_var: float = 1.0, mms: bool = False, discount: float = 0.95, name: str | None = None) -> Scenario:
    sensor = build_relative_model("proximity5", scale=1.0)
    if mms:
        sensor = merge_labels(sensor, {"Detect": ["Near"], "No Detect": ["East", "West", "North", "South"]})
    moves, noise, reward = _planar_parts(rob_var, sensor)
    actions = [Action(a, -moves[a], (rob_var + noise[a]) * np.eye(2)) for a in moves]
    rewards = {a.name: _shifted(reward, a.displacement) for a in actions}
    model = CPOMDPModel(actions, rewards, sensor, discount=discount)
    return Scenario(
        name=name or ("search2d-mms" if mms else "search2d"), model=model,
        initial_belief=_search_belief(), sensor=sensor, planner="difference",
        robber=RobberDynamics("NCP", rob_var), cop_moves=moves, cop_noise=noise,
        cop_start=np.zeros(2), reward_rule=RewardRule(1.0, 5.0, 0.0), state_reward=reward,
        capture_radius=1.0 if mms else None)


NCV_POSITION_NOISE = 0.3
NCV_VELOCITY_NOISE = 0.01
NCV_INITIAL_VELOCITY_STD = 0.3


def ncv_robber() -> RobberDynamics:
    return RobberDynamics("NCV", NCV_POSITION_NOISE, NCV_VELOCITY_NOISE, NCV_INITIAL_VELOCITY_STD, 1.0)


def ncv4d(dt: float = 1.0, discount: float = 0.95) -> Scenario:
    """Planner over ``[rob - cop, rob velocity]`` with nearly-constant velocity."""
    sensor2 = build_relative_model("proximity5", scale=1.0)
    sensor4 = pad_dimensions(sensor2, 4)
    moves, noise, reward2 = _planar_parts(1.0, sensor2)
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    actions = []
    for a in moves:
        Q = np.diag([NCV_POSITION_NOISE + noise[a]] * 2 + [NCV_VELOCITY_NOISE] * 2)
        actions.append(Action(a, np.concatenate([-moves[a], [0.0, 0.0]]), Q))
    # reward ignores velocity: very broad along the velocity axes
    reward = GaussianMixture([10.0 * 2.0 * np.pi * 100.0], [[0.0, 0.0, 0.0, 0.0]],
                             [np.diag([1.0, 1.0, 100.0, 100.0])], MixtureKind.REWARD)
    rewards = {a.name: _shifted(reward, a.displacement) for a in actions}
    model = CPOMDPModel(actions, rewards, sensor4, transition=F, discount=discount)
    b2 = _search_belief()
    v0 = NCV_INITIAL_VELOCITY_STD ** 2 + 0.05
    covs = np.zeros((b2.size, 4, 4))
    covs[:, :2, :2] = b2.covs
    covs[:, 2:, 2:] = v0 * np.eye(2)
    belief = GaussianMixture(b2.weights, np.column_stack([b2.means, np.zeros((b2.size, 2))]), covs,
                             MixtureKind.BELIEF)
    return Scenario(
        name="ncv4d", model=model, initial_belief=belief, sensor=sensor2,
        planner="difference-velocity", robber=ncv_robber(), cop_moves=moves, cop_noise=noise,
        cop_start=np.zeros(2), reward_rule=RewardRule(1.0, 5.0, 0.0), state_reward=reward)


BUILTINS = {
    "colinear": lambda: colinear(),
    "search2d": lambda: search2d(),
    "search2d-slow": lambda: search2d(rob_var=0.7, name="search2d-slow"),
    "search2d-mms": lambda: search2d(mms=True),
    "ncv4d": lambda: ncv4d(),
    "ncp-policy-ncv-truth": lambda: search2d().with_robber(ncv_robber(), "ncp-policy-ncv-truth"),
    "ncv-policy-ncp-truth": lambda: ncv4d().with_robber(RobberDynamics("NCP", 1.0), "ncv-policy-ncp-truth"),
}


def builtin(name: str) -> Scenario:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; built-ins are {sorted(BUILTINS)}") from None


# --------------------------------------------------------------------------
# serialization


def scenario_to_json_dict(sc: Scenario) -> dict:
    rd = sc.robber
    return {
        "name": sc.name,
        "planner": sc.planner,
        "model": sc.model.to_json_dict(),
        "gm_model": None if sc.gm_model is None else sc.gm_model.to_json_dict(),
        "initial_belief": sc.initial_belief.to_json_dict(),
        "sensor": sc.sensor.to_json_dict(),
        "robber": {"kind": rd.kind, "position_noise": rd.position_noise, "velocity_noise": rd.velocity_noise,
                   "initial_velocity_std": rd.initial_velocity_std, "dt": rd.dt},
        "cop_moves": {k: np.asarray(v, dtype=float).tolist() for k, v in sc.cop_moves.items()},
        "cop_noise": {k: float(v) for k, v in sc.cop_noise.items()},
        "cop_start": np.asarray(sc.cop_start, dtype=float).tolist(),
        "reward_rule": {"radius": sc.reward_rule.radius, "inside": sc.reward_rule.inside,
                        "outside": sc.reward_rule.outside},
        "state_reward": sc.state_reward.to_json_dict(),
        "episode_steps": sc.episode_steps,
        "capture_radius": sc.capture_radius,
        "bounds": None if sc.bounds is None else list(sc.bounds),
    }


def scenario_from_json_dict(data: dict) -> Scenario:
    """Inverse of :func:`scenario_to_json_dict`; raises ``KeyError`` naming a missing field."""
    def need(key):
        if key not in data:
            raise KeyError(f"scenario field {key!r} is missing")
        return data[key]

    rd = need("robber")
    gm_model = data.get("gm_model")
    bounds = data.get("bounds")
    return Scenario(
        name=str(need("name")),
        model=CPOMDPModel.from_json_dict(need("model")),
        initial_belief=GaussianMixture.from_json_dict(need("initial_belief")).with_kind(MixtureKind.BELIEF),
        sensor=SoftmaxModel.from_json_dict(need("sensor")),
        planner=str(need("planner")),
        robber=RobberDynamics(str(rd.get("kind", "NCP")), float(rd.get("position_noise", 1.0)),
                              float(rd.get("velocity_noise", 0.0)), float(rd.get("initial_velocity_std", 0.0)),
                              float(rd.get("dt", 1.0))),
        cop_moves={k: np.asarray(v, dtype=float) for k, v in need("cop_moves").items()},
        cop_noise={k: float(v) for k, v in need("cop_noise").items()},
        cop_start=np.asarray(need("cop_start"), dtype=float),
        reward_rule=RewardRule(**{k: float(v) for k, v in need("reward_rule").items()}),
        state_reward=GaussianMixture.from_json_dict(need("state_reward")),
        episode_steps=int(data.get("episode_steps", 100)),
        capture_radius=None if data.get("capture_radius") is None else float(data["capture_radius"]),
        bounds=None if bounds is None else (float(bounds[0]), float(bounds[1])),
        gm_model=None if gm_model is None else CPOMDPModel.from_json_dict(gm_model),
    )
