"""Gauss-Hermite expectations under a Gaussian, for checking variational bounds."""

from __future__ import annotations

import itertools

import numpy as np

from .softmax import SoftmaxModel


def hermite_rule(mean, cov, order: int = 40):
    """Nodes and weights with ``sum(w f(x)) ~ E[f(s)]`` for ``s ~ N(mean, cov)``."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    n = mean.size
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    L = np.linalg.cholesky(np.asarray(cov, dtype=float).reshape(n, n))
    grid = np.array(list(itertools.product(x, repeat=n)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=n))), axis=1)
    return mean + grid @ L.T, weights


def class_mass(mean, cov, model: SoftmaxModel, class_index: int, order: int = 40) -> float:
    """``E[p(class | s)]`` under ``N(mean, cov)``."""
    nodes, weights = hermite_rule(mean, cov, order)
    return float(weights @ model.class_probs(nodes)[:, class_index])
