"""Multilayer perceptron with a softmax head and hand-written backpropagation.

Per-example weights enter the backward pass as constants: the gradient of
``(1/n) sum_i w_i * loss_i`` is computed with ``w`` held fixed, which is what
the variance-increasing objective needs (see :mod:`vrnl.risk`).
"""

from dataclasses import dataclass

import numpy as np

from .numerics import stable_softmax

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


@dataclass
class MLP:
    """Layer parameters; ``weights[k]`` has shape ``(d_out, d_in)``."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: weight {W.shape} and bias {b.shape} disagree")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} expects {W.shape[1]} inputs, previous layer emits "
                                 f"{self.weights[k - 1].shape[0]}")

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_classes(self):
        return self.weights[-1].shape[0]

    def arrays(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, v):
        v = np.asarray(v, dtype=np.float64)
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(v[pos:pos + a.size].reshape(a.shape))
            pos += a.size
        if pos != v.size:
            raise ValueError(f"flat vector has {v.size} entries, model has {pos}")
        return MLP(arrays[0::2], arrays[1::2])

    def zeros_like(self):
        return MLP([np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases])

    def copy(self):
        return MLP([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def checksum(self):
        return hash(self.flat().tobytes())

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays())


def init_mlp(sizes, rng):
    """Fan-balanced uniform init for weights, zero biases."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-limit, limit, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return MLP(weights, biases)


def _forward(params, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"input has {X.shape[1]} features, model expects "
                         f"{params.weights[0].shape[1]}")
    acts = [X]
    h = X
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T + b
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(params, X):
    """Class probabilities, one row per input row."""
    return stable_softmax(_forward(params, X)[-1])


def logits(params, X):
    return _forward(params, X)[-1]


def backward(params, acts, dlogits):
    """Backpropagate ``dlogits`` (already scaled per example) to parameters."""
    gW, gb = [], []
    delta = dlogits
    for k in range(len(params.weights) - 1, -1, -1):
        h_in = acts[k]
        gW.append(delta.T @ h_in)
        gb.append(delta.sum(axis=0))
        if k:
            delta = (delta @ params.weights[k]) * (acts[k] > 0.0)
    return MLP(gW[::-1], gb[::-1])


def per_example_ce(probs, labels):
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels))
    C = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range [0, {C})")
    p = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p, PROB_FLOOR))


class CrossEntropyHead:
    """Plain cross-entropy on the model's own probabilities."""

    def losses(self, probs, labels):
        return per_example_ce(probs, labels)

    def grad_logits(self, probs, labels, coef):
        """d(sum_i coef_i * loss_i)/d logits."""
        n = len(labels)
        idx = np.arange(n)
        g = probs.copy()
        g[idx, labels] -= 1.0
        # clamped examples have a constant loss
        g[probs[idx, labels] < PROB_FLOOR] = 0.0
        return g * coef[:, None]


class ForwardHead:
    """Cross-entropy on ``T @ p``: the model output is mixed into a noisy-label
    distribution before the loss."""

    def __init__(self, T):
        T = np.asarray(T, dtype=np.float64)
        if T.ndim != 2 or T.shape[0] != T.shape[1]:
            raise ValueError(f"mixing matrix must be square, got {T.shape}")
        self.T = T

    def _mixed(self, probs):
        if probs.shape[1] != self.T.shape[1]:
            raise ValueError(f"model emits {probs.shape[1]} classes, matrix is {self.T.shape}")
        return probs @ self.T.T

    def losses(self, probs, labels):
        return per_example_ce(self._mixed(probs), labels)

    def _dq(self, probs, labels, coef):
        q = self._mixed(probs)
        qy = q[np.arange(len(labels)), labels]
        live = qy >= PROB_FLOOR
        return np.where(live, -coef / np.where(live, qy, 1.0), 0.0)

    def grad_logits(self, probs, labels, coef):
        s = self._dq(probs, labels, coef)
        g = self.T[labels, :] * s[:, None]  # d/dp
        return probs * (g - (probs * g).sum(axis=1, keepdims=True))

    def grad_matrix(self, probs, labels, coef):
        """d(sum_i coef_i * loss_i)/dT."""
        s = self._dq(probs, labels, coef)
        G = np.zeros_like(self.T)
        np.add.at(G, labels, probs * s[:, None])
        return G


def example_losses(params, X, labels, head):
    acts = _forward(params, X)
    probs = stable_softmax(acts[-1])
    return head.losses(probs, labels), probs, acts


def weighted_batch_gradient(params, X, labels, weights, head, _cache=None):
    """Return ``(mean_i w_i l_i, grad)`` with ``w`` treated as constant.

    ``_cache`` lets callers that already ran the forward pass (to compute the
    weights from the losses) skip a second one.
    """
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if _cache is None:
        losses, probs, acts = example_losses(params, X, labels, head)
    else:
        losses, probs, acts = _cache
    n = len(labels)
    if weights.shape != (n,):
        raise ValueError(f"need {n} weights, got shape {weights.shape}")
    bad = np.flatnonzero(~np.isfinite(weights))
    if bad.size:
        raise ValueError(f"non-finite weight at example {bad[0]}")
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise ValueError(f"non-finite loss at example {bad[0]}")
    coef = weights / n
    grads = backward(params, acts, head.grad_logits(probs, labels, coef))
    return float(np.dot(coef, losses)), grads


def finite_difference_gradient(params, objective, h=1e-5):
    """Central differences of ``objective`` w.r.t. every parameter.

    ``params`` is either an :class:`MLP` or a float array.
    """
    if isinstance(params, MLP):
        base = params.flat()
        rebuild = params.with_flat
    else:
        base = np.array(params, dtype=np.float64)
        shape = base.shape
        base = base.ravel()
        rebuild = lambda v: v.reshape(shape)  # noqa: E731
    grad = np.zeros_like(base)
    for k in range(base.size):
        v = base.copy()
        v[k] = base[k] + h
        up = objective(rebuild(v))
        v[k] = base[k] - h
        down = objective(rebuild(v))
        grad[k] = (up - down) / (2.0 * h)
    return rebuild(grad)


def max_relative_error(a, b):
    """Largest absolute discrepancy scaled by the largest gradient magnitude."""
    a = a.flat() if isinstance(a, MLP) else np.ravel(a)
    b = b.flat() if isinstance(b, MLP) else np.ravel(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


def save_checkpoint(path, params, **extra):
    payload = {"format_version": np.array(CHECKPOINT_VERSION),
               "n_layers": np.array(len(params.weights))}
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        payload[f"W{k}"] = W
        payload[f"b{k}"] = b
    for key, val in extra.items():
        payload[f"extra_{key}"] = np.asarray(val)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Return ``(params, extras)``."""
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        n = int(z["n_layers"])
        params = MLP([z[f"W{k}"] for k in range(n)], [z[f"b{k}"] for k in range(n)])
        extras = {k[len("extra_"):]: z[k] for k in z.files if k.startswith("extra_")}
    return params, extras
