"""Softmax and multimodal-softmax (MMS) semantic observation models."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .gm import DimensionError


class SoftmaxModel:
    """Linear softmax classes grouped under observation labels.

    Parameters
    ----------
    weights : array_like, shape (C, N)
        One weight vector per class.
    biases : array_like, shape (C,)
    labels : mapping of str to sequence of int, optional
        Label name -> class indices.  The sets must partition the classes.
        Defaults to one label per class named ``"0"``, ``"1"``, ...
    """

    def __init__(self, weights, biases, labels: Mapping[str, Sequence[int]] | None = None):
        W = np.atleast_2d(np.asarray(weights, dtype=float))
        b = np.asarray(biases, dtype=float).reshape(-1)
        if W.shape[0] != b.size:
            raise ValueError(f"{W.shape[0]} weight vectors but {b.size} biases")
        if labels is None:
            labels = {str(c): [c] for c in range(b.size)}
        labels = {str(k): tuple(int(i) for i in v) for k, v in labels.items()}
        seen = sorted(i for idx in labels.values() for i in idx)
        if seen != list(range(b.size)) or any(len(v) == 0 for v in labels.values()):
            raise ValueError("labels must partition the class indices")
        W.setflags(write=False)
        b.setflags(write=False)
        self.weights = W
        self.biases = b
        self.labels = labels

    @property
    def dimension(self) -> int:
        return self.weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.biases.size

    @property
    def label_names(self) -> list[str]:
        return list(self.labels)

    def __repr__(self):
        return f"SoftmaxModel(classes={self.num_classes}, dimension={self.dimension}, labels={self.label_names})"

    def _states(self, states):
        s = np.asarray(states, dtype=float)
        single = s.ndim == 1
        s = np.atleast_2d(s)
        if s.shape[1] != self.dimension:
            raise DimensionError(f"state of dimension {s.shape[1]} for a {self.dimension}-D model")
        return s, single

    def class_log_probs(self, states) -> np.ndarray:
        """Log class probabilities, shape ``(P, C)`` (or ``(C,)`` for one state)."""
        s, single = self._states(states)
        logits = s @ self.weights.T + self.biases
        out = logits - logsumexp(logits, axis=1, keepdims=True)
        return out[0] if single else out

    def class_probs(self, states) -> np.ndarray:
        return np.exp(self.class_log_probs(states))

    def label_probs(self, states) -> dict[str, np.ndarray]:
        logp = np.atleast_2d(self.class_log_probs(states))
        single = np.asarray(states).ndim == 1
        out = {}
        for name, idx in self.labels.items():
            p = np.exp(logsumexp(logp[:, list(idx)], axis=1))
            out[name] = p[0] if single else p
        return out

    def label_prob(self, state, label: str):
        if label not in self.labels:
            raise KeyError(f"unknown observation label {label!r}")
        logp = np.atleast_2d(self.class_log_probs(state))
        p = np.exp(logsumexp(logp[:, list(self.labels[label])], axis=1))
        return float(p[0]) if np.asarray(state).ndim == 1 else p

    def to_json_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "classes": [{"w": w.tolist(), "b": float(b)} for w, b in zip(self.weights, self.biases)],
            "labels": {k: list(v) for k, v in self.labels.items()},
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SoftmaxModel":
        try:
            n = int(data["dimension"])
            W = np.array([c["w"] for c in data["classes"]], dtype=float).reshape(-1, n)
            b = [float(c["b"]) for c in data["classes"]]
            labels = data.get("labels")
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed softmax JSON: {exc}") from exc
        return cls(W, b, labels)


def label_prob(model: SoftmaxModel, state, label: str) -> float:
    return model.label_prob(state, label)


def linear_embed(model: SoftmaxModel, matrix) -> SoftmaxModel:
    """Model over ``x`` whose logits equal the original logits at ``matrix @ x``."""
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    if A.shape[0] != model.dimension:
        raise DimensionError("embedding matrix rows must equal the model dimension")
    return SoftmaxModel(model.weights @ A, model.biases, model.labels)


def pad_dimensions(model: SoftmaxModel, new_dimension: int, axis_map: Mapping[int, int] | None = None):
    """Embed the model in a larger state space with zero weights on new axes.

    ``axis_map`` sends each old axis to its new position (identity by default).
    """
    n = model.dimension
    if new_dimension < n:
        raise ValueError("cannot pad to fewer dimensions")
    if axis_map is None:
        axis_map = {i: i for i in range(n)}
    if sorted(axis_map) != list(range(n)):
        raise ValueError("axis map must cover every original axis")
    targets = list(axis_map.values())
    if len(set(targets)) != len(targets) or min(targets) < 0 or max(targets) >= new_dimension:
        raise ValueError("axis map must be injective into the new dimensions")
    A = np.zeros((n, new_dimension))
    for old, new in axis_map.items():
        A[old, new] = 1.0
    return linear_embed(model, A)


def build_relative_model(kind: str, scale: float = 1.0, sharpness: float = 3.0) -> SoftmaxModel:
    """Synthesize one of the two relative-position sensor layouts.

    ``proximity5`` is a 2-D model with classes Near/East/West/North/South: the
    cardinal classes have weights ``(sharpness/scale) * unit normal`` and zero
    bias; Near has zero weight and the bias that puts its 50% contour at
    distance ``scale`` along each axis.

    ``detect_nodetect3`` is a 1-D model over the signed offset with a Detect
    class and two classes (left/right) grouped under "No Detect"; its Detect
    region is ``|x| < scale``.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    k = float(sharpness)
    if kind == "proximity5":
        u = k / scale
        W = np.array([[0.0, 0.0], [u, 0.0], [-u, 0.0], [0.0, u], [0.0, -u]])
        # at (scale, 0): e^b = e^k + e^-k + 2 makes Near exactly 1/2
        b_near = 2.0 * np.log(2.0 * np.cosh(k / 2.0))
        b = np.array([b_near, 0.0, 0.0, 0.0, 0.0])
        labels = {"Near": [0], "East": [1], "West": [2], "North": [3], "South": [4]}
        return SoftmaxModel(W, b, labels)
    if kind == "detect_nodetect3":
        u = k / scale
        W = np.array([[0.0], [-u], [u]])
        b_detect = np.log(2.0 * np.cosh(k))
        b = np.array([b_detect, 0.0, 0.0])
        return SoftmaxModel(W, b, {"Detect": [0], "No Detect": [1, 2]})
    raise ValueError(f"unknown relative model kind {kind!r}")


def merge_labels(model: SoftmaxModel, groups: Mapping[str, Sequence[str]]) -> SoftmaxModel:
    """Regroup existing labels into coarser MMS labels."""
    labels = {}
    for name, members in groups.items():
        labels[name] = [i for m in members for i in model.labels[m]]
    return SoftmaxModel(model.weights, model.biases, labels)
