"""Dense joint-Gaussian solve of a linearized factor graph, used to check tree BP."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from inference.factor_graph import FactorGraph, initial_point, linearize_all
from inference.gaussian_core import safe_inverse
from utils.errors import InvertibilityError, ObservabilityError


def dense_solve(graph: FactorGraph, points: Mapping[str, np.ndarray] | None = None,
                observations: Mapping[str, np.ndarray] | None = None,
                mask: Mapping[str, np.ndarray] | None = None, inversion: dict | None = None):
    """
    Stack every linearized factor into one global (J, h) and invert it.

    Returns per-variable means x̄ + δ and marginal covariances (diagonal blocks
    of J⁻¹), linearized at ``points`` (default: the inference starting point).

    Raises
    ------
    ObservabilityError
        If the global precision is singular.
    """
    bound = graph.copy_with_observations(observations, mask)
    points = initial_point(bound) if points is None else {k: np.asarray(v, dtype=float) for k, v in points.items()}
    offsets, total = {}, 0
    for vid, v in bound.variables.items():
        offsets[vid] = np.arange(total, total + v.dim)
        total += v.dim
    J = np.zeros((total, total))
    h = np.zeros(total)
    for lf in linearize_all(bound, points, inversion).values():
        idx = np.concatenate([offsets[v] for v in lf.variables])
        J[np.ix_(idx, idx)] += lf.gaussian.J
        h[idx] += lf.gaussian.h
    try:
        cov = safe_inverse(J, label="global precision")
    except InvertibilityError as e:
        raise ObservabilityError(f"Global precision is singular: {e}", list(bound.variables))
    delta = cov @ h
    means = {vid: points[vid] + delta[idx] for vid, idx in offsets.items()}
    covariances = {vid: cov[np.ix_(idx, idx)] for vid, idx in offsets.items()}
    return means, covariances
