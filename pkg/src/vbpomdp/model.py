"""Continuous-state POMDP problem definition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .gm import GaussianMixture, MixtureKind, check_covariances
from .softmax import SoftmaxModel


@dataclass(frozen=True)
class Action:
    """A noisy action: ``s' ~ N(F s + displacement, noise)``."""

    name: str
    displacement: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=float).reshape(-1)
        Q = np.asarray(self.noise, dtype=float)
        if Q.shape != (d.size, d.size):
            raise ValueError(f"action {self.name!r}: noise must be {d.size}x{d.size}")
        check_covariances(Q[None])
        d.setflags(write=False)
        Q = Q.copy()
        Q.setflags(write=False)
        object.__setattr__(self, "displacement", d)
        object.__setattr__(self, "noise", Q)

    def to_json_dict(self) -> dict:
        return {"name": self.name, "displacement": self.displacement.tolist(), "noise": self.noise.tolist()}

    @classmethod
    def from_json_dict(cls, data: dict) -> "Action":
        return cls(str(data["name"]), data["displacement"], data["noise"])


class CPOMDPModel:
    """Actions, LTI transition, per-action GM rewards and an observation model.

    Parameters
    ----------
    actions : sequence of Action
    rewards : mapping of action name to GaussianMixture
        Reward for taking the action in state ``s``.
    observation : SoftmaxModel or mapping of label to GaussianMixture
        Either a (multimodal) softmax model or one GM likelihood per label.
    transition : array_like, optional
        State-transition matrix ``F`` (identity by default).
    discount : float
    observed_axes : sequence of int
        State axes that the agent measures directly (its own position).  The
        filter conditions on them; planning ignores them.
    """

    def __init__(self, actions: Sequence[Action], rewards: Mapping[str, GaussianMixture],
                 observation, transition=None, discount: float = 0.95,
                 observed_axes: Sequence[int] = ()):
        actions = tuple(actions)
        if not actions:
            raise ValueError("at least one action is required")
        names = [a.name for a in actions]
        if len(set(names)) != len(names):
            raise ValueError("action names must be unique")
        n = actions[0].displacement.size
        if any(a.displacement.size != n for a in actions):
            raise ValueError("all actions must share the state dimension")
        if set(rewards) != set(names):
            raise ValueError("rewards must be given for exactly the model's actions")
        for name, r in rewards.items():
            if r.dimension != n:
                raise ValueError(f"reward for {name!r} has dimension {r.dimension}, expected {n}")
        F = np.eye(n) if transition is None else np.asarray(transition, dtype=float)
        if F.shape != (n, n):
            raise ValueError(f"transition matrix must be {n}x{n}")
        det = float(np.linalg.det(F))
        if abs(det) <= 1e-12:
            raise ValueError("transition matrix must be invertible")
        if not 0.0 < discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if isinstance(observation, SoftmaxModel):
            if observation.dimension != n:
                raise ValueError("observation model dimension mismatch")
        else:
            observation = {str(k): v for k, v in observation.items()}
            if not observation:
                raise ValueError("observation labels must be nonempty")
            for label, g in observation.items():
                if g.dimension != n:
                    raise ValueError(f"likelihood for {label!r} has the wrong dimension")
                if np.any(g.weights <= 0):
                    raise ValueError(f"likelihood for {label!r} needs positive weights")
        axes = tuple(int(i) for i in observed_axes)
        if any(not 0 <= i < n for i in axes) or len(set(axes)) != len(axes):
            raise ValueError("observed axes must be distinct state axes")

        F.setflags(write=False)
        self.dimension = n
        self.actions = actions
        self.rewards = {name: rewards[name] for name in names}
        self.observation = observation
        self.transition = F
        self.transition_inv = np.linalg.inv(F)
        self.transition_inv.setflags(write=False)
        self.omega = abs(det)
        self.discount = float(discount)
        self.observed_axes = axes

    @property
    def action_names(self) -> list[str]:
        return [a.name for a in self.actions]

    @property
    def is_softmax(self) -> bool:
        return isinstance(self.observation, SoftmaxModel)

    @property
    def labels(self) -> list[str]:
        return self.observation.label_names if self.is_softmax else list(self.observation)

    @property
    def identity_transition(self) -> bool:
        return bool(np.array_equal(self.transition, np.eye(self.dimension)))

    def action(self, name: str) -> Action:
        for a in self.actions:
            if a.name == name:
                return a
        raise KeyError(f"unknown action {name!r}")

    def action_index(self, name: str) -> int:
        return self.action_names.index(name)

    def label_probs(self, state) -> dict[str, float]:
        """Observation label probabilities at a single state."""
        s = np.asarray(state, dtype=float)
        if self.is_softmax:
            return {k: float(v) for k, v in self.observation.label_probs(s).items()}
        vals = {k: float(g.evaluate(s)) for k, g in self.observation.items()}
        tot = sum(vals.values())
        if tot <= 0:
            return {k: 1.0 / len(vals) for k in vals}
        return {k: v / tot for k, v in vals.items()}

    def replace(self, **changes) -> "CPOMDPModel":
        """Copy with some constructor arguments replaced."""
        args = dict(actions=self.actions, rewards=self.rewards, observation=self.observation,
                    transition=self.transition, discount=self.discount,
                    observed_axes=self.observed_axes)
        args.update(changes)
        return CPOMDPModel(**args)

    def to_json_dict(self) -> dict:
        if self.is_softmax:
            obs = {"softmax": self.observation.to_json_dict()}
        else:
            obs = {"likelihoods": {k: g.to_json_dict() for k, g in self.observation.items()}}
        return {
            "dimension": self.dimension,
            "actions": [a.to_json_dict() for a in self.actions],
            "transition": self.transition.tolist(),
            "rewards": {k: r.to_json_dict() for k, r in self.rewards.items()},
            "observation": obs,
            "discount": self.discount,
            "observed_axes": list(self.observed_axes),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "CPOMDPModel":
        actions = [Action.from_json_dict(a) for a in data["actions"]]
        rewards = {k: GaussianMixture.from_json_dict(v) for k, v in data["rewards"].items()}
        obs = data["observation"]
        if "softmax" in obs:
            observation = SoftmaxModel.from_json_dict(obs["softmax"])
        elif "likelihoods" in obs:
            observation = {k: GaussianMixture.from_json_dict(v).with_kind(MixtureKind.LIKELIHOOD)
                           for k, v in obs["likelihoods"].items()}
        else:
            raise KeyError("observation needs a 'softmax' or 'likelihoods' entry")
        return cls(actions, rewards, observation, data.get("transition"),
                   float(data.get("discount", 0.95)), data.get("observed_axes", ()))
