"""Transition matrices, label corruption and transition-matrix bias injection.

Convention throughout: ``T[i, j] = P(noisy = i | clean = j)``, so every
column is a distribution over noisy labels.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import entrywise_l1, rng_stream

COLUMN_TOL = 1e-12

KINDS = ("symmetric", "asymmetric", "pair")


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Column-stochastic ``C x C`` matrix. The array is stored read-only."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
            raise ValueError(f"transition matrix must be C x C with C >= 2, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transition matrix has non-finite entries")
        if m.min() < 0.0 or m.max() > 1.0:
            raise ValueError("transition matrix entries must lie in [0, 1]")
        sums = m.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > COLUMN_TOL:
            raise ValueError(f"columns must sum to 1, got {sums}")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def C(self):
        return self.m.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.m if dtype is None else self.m.astype(dtype)

    def __eq__(self, other):
        return isinstance(other, TransitionMatrix) and np.array_equal(self.m, other.m)

    def is_diagonally_dominant(self):
        off = self.m - np.diag(np.diag(self.m))
        return bool(np.all(np.diag(self.m) > off.max(axis=0)))


def _check_classes(C):
    if int(C) != C or C < 2:
        raise ValueError(f"need at least 2 classes, got {C}")


def build_symmetric(C, rate):
    _check_classes(C)
    # the upper end gives the uniform matrix, which is valid but not dominant
    if not 0.0 <= rate <= (C - 1) / C:
        raise ValueError(f"symmetric noise rate must be in [0, {(C - 1) / C:.4g}], got {rate}")
    m = np.full((C, C), rate / (C - 1))
    np.fill_diagonal(m, 1.0 - rate)
    return TransitionMatrix(m)


def _flip_to_next(C, rates):
    m = np.zeros((C, C))
    for j in range(C):
        m[j, j] = 1.0 - rates[j]
        m[(j + 1) % C, j] = rates[j]
    return TransitionMatrix(m)


def build_pair(C, rate):
    _check_classes(C)
    if not 0.0 <= rate < 0.5:
        raise ValueError(f"pair noise rate must be in [0, 0.5), got {rate}")
    return _flip_to_next(C, np.full(C, rate))


def build_asymmetric(C, rate, seed):
    """Class-dependent flips: class ``j`` moves to ``j+1 mod C`` with a seeded
    rate drawn uniformly from ``[rate/2, rate]``."""
    _check_classes(C)
    if not 0.0 <= rate < 0.5:
        raise ValueError(f"asymmetric noise rate must be in [0, 0.5), got {rate}")
    rates = rng_stream(seed, "asymmetric").uniform(0.5 * rate, rate, size=C)
    return _flip_to_next(C, rates)


def build(kind, C, rate, seed=0):
    if kind == "symmetric":
        return build_symmetric(C, rate)
    if kind == "pair":
        return build_pair(C, rate)
    if kind == "asymmetric":
        return build_asymmetric(C, rate, seed)
    raise ValueError(f"unknown noise kind {kind!r}; expected one of {KINDS}")


def corrupt_labels(clean, T, rng):
    """Draw each noisy label independently from column ``clean[i]`` of ``T``.

    Uses one uniform draw per example and inverse-CDF lookup, so results only
    depend on (labels, T, rng state).
    """
    m = np.asarray(T)
    C = m.shape[0]
    clean = np.asarray(clean)
    if clean.size and (clean.min() < 0 or clean.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    u = rng.random(clean.shape[0])
    cdf = np.cumsum(m, axis=0)
    cdf[-1, :] = 1.0
    cols = cdf[:, clean]  # C x n
    noisy = (u[None, :] >= cols).sum(axis=0)
    return np.minimum(noisy, C - 1).astype(np.int64)


def perturb_and_normalize(T, gamma, rng=None, delta=None):
    """Inject ``gamma * |delta|`` into ``T`` and renormalise columns.

    ``delta`` is drawn from a standard normal unless given explicitly. Returns
    the normalised matrix and its relative entry-wise L1 error against ``T``.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    m = np.asarray(T)
    if delta is None:
        if rng is None:
            raise ValueError("need an rng or an explicit delta")
        delta = rng.standard_normal(m.shape)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != m.shape:
        raise ValueError(f"delta shape {delta.shape} does not match T {m.shape}")
    if gamma == 0.0:
        return TransitionMatrix(m), 0.0
    biased = m + gamma * np.abs(delta)
    normed = biased / biased.sum(axis=0, keepdims=True)
    err = entrywise_l1(m - normed) / entrywise_l1(m)
    return TransitionMatrix(normed), err


def relative_error(T, T_hat):
    return entrywise_l1(np.asarray(T) - np.asarray(T_hat)) / entrywise_l1(T)


def save_matrix(path, T, header=None):
    """Plain-text format: optional ``#`` comment lines, then ``C``, then C rows."""
    m = np.asarray(T)
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    lines.append(str(m.shape[0]))
    for row in m:
        lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_matrix(path):
    with open(path) as fh:
        rows = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    C = int(rows[0])
    if len(rows) != C + 1:
        raise ValueError(f"{path}: expected {C} rows, found {len(rows) - 1}")
    m = np.array([[float(v) for v in r.split()] for r in rows[1:]])
    if m.shape != (C, C):
        raise ValueError(f"{path}: matrix is {m.shape}, header says {C}")
    return TransitionMatrix(m)
