"""Anchor-point estimation of the transition matrix from a noisy-posterior model."""

import numpy as np

from .noise import TransitionMatrix
from .numerics import solve

DEFAULT_PERCENTILE = 97.0


def _anchor_index(scores, percentile):
    """Index of the example sitting at ``percentile`` of ``scores``.

    Percentile 100 is the arg-max; lower percentiles skip the extreme tail,
    which guards against outliers with overconfident predictions.
    """
    order = np.argsort(scores, kind="stable")
    rank = int(np.ceil(percentile / 100.0 * len(scores))) - 1
    return order[min(max(rank, 0), len(scores) - 1)]


def anchor_indices(noisy_posteriors, percentile=DEFAULT_PERCENTILE):
    probs = np.asarray(noisy_posteriors, dtype=np.float64)
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("need a non-empty (n, C) array of posteriors")
    return [_anchor_index(probs[:, j], percentile) for j in range(probs.shape[1])]


def estimate_T_anchor(model, X, percentile=DEFAULT_PERCENTILE, labels=None):
    """Column ``j`` of the estimate is the model's noisy posterior at the
    class-``j`` anchor.

    ``model`` maps an ``(n, d)`` array to ``(n, C)`` noisy posteriors. When
    ``labels`` is given every class must occur in it.
    """
    probs = np.asarray(model(X), dtype=np.float64)
    C = probs.shape[1]
    if labels is not None:
        missing = sorted(set(range(C)) - set(np.unique(labels).tolist()))
        if missing:
            raise ValueError(f"no examples for classes {missing}")
    T = np.empty((C, C))
    for j, idx in enumerate(anchor_indices(probs, percentile)):
        T[:, j] = probs[idx]
    T = np.clip(T, 0.0, 1.0)
    return TransitionMatrix(T / T.sum(axis=0, keepdims=True))


def invert_for_clean_posterior(T, noisy_posterior):
    """Solve ``T p = p_noisy`` for ``p``. The result can leave the simplex
    when ``T`` or the noisy posterior is misestimated; it is returned as is.
    """
    return solve(np.asarray(T), np.asarray(noisy_posterior, dtype=np.float64).T).T


def on_simplex(p, tol=1e-9):
    p = np.atleast_2d(p)
    return bool(np.all(p >= -tol) and np.all(np.abs(p.sum(axis=1) - 1.0) <= tol))
