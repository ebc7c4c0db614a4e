"""Shared numerical primitives: stable softmax, log-determinants, seeded streams.

Matrices are plain float64 ``numpy`` arrays. Functions never mutate their
inputs.
"""

import numpy as np
from scipy import linalg

SINGULAR_PIVOT = 1e-300

# Named random streams. Each experiment derives every stream from one
# top-level seed so that changing e.g. the shuffling order leaves the weight
# initialisation untouched.
STREAMS = {
    "init": 0,
    "shuffle": 1,
    "corruption": 2,
    "perturbation": 3,
    "data": 4,
    "split": 5,
    "asymmetric": 6,
    "subsample": 7,
}


class SingularMatrixError(ValueError):
    pass


def rng_stream(seed, stream=0):
    """Return a ``numpy.random.Generator`` for ``(seed, stream)``.

    ``stream`` may be an integer or one of the names in ``STREAMS``. PCG64
    with a ``SeedSequence`` spawn key gives identical draws on every platform.
    """
    if isinstance(stream, str):
        stream = STREAMS[stream]
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite entries")


def stable_softmax(logits):
    """Softmax over the last axis, computed with max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    _check_finite(z, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _lu(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    _check_finite(m, "matrix")
    lu, piv = linalg.lu_factor(m, check_finite=False)
    pivots = np.diag(lu)
    if np.min(np.abs(pivots)) < SINGULAR_PIVOT:
        raise SingularMatrixError("matrix is singular (pivot below 1e-300)")
    return lu, piv


def log_det(m):
    """Return ``(sign, log|det m|)`` from a partially pivoted LU factorisation."""
    lu, piv = _lu(m)
    d = np.diag(lu)
    swaps = np.count_nonzero(piv != np.arange(len(piv)))
    sign = (-1.0) ** swaps * np.prod(np.sign(d))
    return float(sign), float(np.sum(np.log(np.abs(d))))


def log_det_gradient(m):
    """d log|det m| / dm, i.e. the transpose of the inverse."""
    lu, piv = _lu(m)
    inv = linalg.lu_solve((lu, piv), np.eye(lu.shape[0]), check_finite=False)
    return inv.T


def solve(m, b):
    lu, piv = _lu(m)
    return linalg.lu_solve((lu, piv), np.asarray(b, dtype=np.float64), check_finite=False)


def entrywise_l1(m):
    """The entry-wise (1,1) norm: sum of absolute entries."""
    return float(np.abs(np.asarray(m, dtype=np.float64)).sum())
