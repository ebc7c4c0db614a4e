"""Objectives that subtract ``alpha * Var(loss)`` from an empirical risk.

Increasing the spread of per-example losses is equivalent, at the gradient
level, to reweighting example ``i`` by ``w_i = 1 + 2 alpha (mean(l) - l_i)``:
small-loss examples get pushed harder, large-loss (often mislabeled) examples
get pushed less.
"""

from dataclasses import dataclass

import numpy as np

from .classifier import ForwardHead, example_losses, forward, weighted_batch_gradient
from .numerics import log_det, log_det_gradient

METHODS = ("ce", "forward", "reweight", "volmin")
MEAN_MODES = ("batch", "running")
DENOM_FLOOR = 1e-12
RUNNING_DECAY = 0.9
# beyond this sigmoid(u) rounds to 1 and a 2x2 diagonal would tie its off-diagonal
U_LIMIT = 30.0


@dataclass(frozen=True)
class RiskSpec:
    method: str = "ce"
    alpha: float = 0.0
    lam: float = 1e-4
    mean_mode: str = "batch"
    weight_floor: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.mean_mode not in MEAN_MODES:
            raise ValueError(f"unknown mean mode {self.mean_mode!r}")
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be non-negative")


def _as_losses(losses):
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("need a non-empty vector of losses")
    if not np.all(np.isfinite(losses)):
        raise ValueError("non-finite losses")
    return losses


def loss_variance(losses):
    """Divide-by-n variance, computed in two passes."""
    losses = _as_losses(losses)
    return float(np.mean((losses - losses.mean()) ** 2))


def vrnl_empirical_risk(losses, alpha):
    losses = _as_losses(losses)
    return float(losses.mean() - alpha * loss_variance(losses))


class RunningMean:
    """Exponential moving average of batch-mean losses (decay 0.9)."""

    def __init__(self, decay=RUNNING_DECAY):
        self.decay = decay
        self.value = None

    def update(self, batch_mean):
        if self.value is None:
            self.value = float(batch_mean)
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * float(batch_mean)
        return self.value


def eq2_weights(losses, alpha, floor=0.0, reference_mean=None):
    """Per-example gradient weights ``1 + 2 alpha (ref - l_i)``.

    ``ref`` is the batch mean unless ``reference_mean`` is given (running
    mode). Weights below ``floor`` are clamped; returns ``(weights, n_clamped)``.
    """
    losses = _as_losses(losses)
    ref = losses.mean() if reference_mean is None else float(reference_mean)
    w = 1.0 + 2.0 * alpha * (ref - losses)
    low = w < floor
    n_clamped = int(np.count_nonzero(low))
    if n_clamped:
        w = np.where(low, floor, w)
    return w, n_clamped


def forward_loss_head(T_hat):
    return ForwardHead(np.asarray(T_hat, dtype=np.float64))


class PosteriorSnapshot:
    """A frozen copy of a model used as a posterior estimate."""

    def __init__(self, params):
        self.params = params.copy()

    def __call__(self, X):
        return forward(self.params, X)


def reweight_factors(g, T_hat, labels):
    """Importance ratios ``g_y / (T g)_y`` at the observed noisy labels.

    ``g`` is an ``(n, C)`` array of snapshot posteriors. Returns
    ``(beta, n_clamped)`` where ``n_clamped`` counts denominators floored at
    1e-12.
    """
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    labels = np.asarray(labels)
    idx = np.arange(len(labels))
    num = g[idx, labels]
    den = (g @ np.asarray(T_hat, dtype=np.float64).T)[idx, labels]
    low = den < DENOM_FLOOR
    beta = num / np.maximum(den, DENOM_FLOOR)
    return beta, int(np.count_nonzero(low))


def reweight_vrnl_risk(losses, beta, alpha):
    """Variance-increasing risk on the products ``beta_i * l_i``.

    Returns ``(risk, w_hat)``; ``w_hat_i`` multiplies the gradient of
    ``beta_i * l_i`` (beta held constant).
    """
    prod = _as_losses(np.asarray(beta) * np.asarray(losses))
    w, _ = eq2_weights(prod, alpha, floor=-np.inf)
    return vrnl_empirical_risk(prod, alpha), w


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


class TrainableTransition:
    """Column-stochastic, diagonally dominant matrix from free off-diagonals.

    Off-diagonal ``(i, j)`` is ``sigmoid(u_ij) / C``, the diagonal absorbs the
    remainder of each column, so every column sums to one and each diagonal
    entry exceeds ``1/C`` while each off-diagonal stays below it.
    """

    def __init__(self, C, init=-4.0, u=None):
        if u is None:
            u = np.full((C, C), float(init))
        u = np.array(u, dtype=np.float64)
        if u.shape != (C, C):
            raise ValueError(f"expected ({C}, {C}) parameters, got {u.shape}")
        np.fill_diagonal(u, 0.0)
        self.C = C
        self.u = u

    def _offdiag_mask(self):
        return ~np.eye(self.C, dtype=bool)

    def matrix(self):
        mask = self._offdiag_mask()
        off = np.where(mask, _sigmoid(np.clip(self.u, -U_LIMIT, U_LIMIT)) / self.C, 0.0)
        return off + np.diag(1.0 - off.sum(axis=0))

    def backward(self, G):
        """Chain ``dL/dT`` through the parameterisation to ``dL/du``."""
        G = np.asarray(G, dtype=np.float64)
        s = _sigmoid(np.clip(self.u, -U_LIMIT, U_LIMIT))
        du = (G - np.diag(G)[None, :]) * s * (1.0 - s) / self.C
        du[~self._offdiag_mask() | (np.abs(self.u) > U_LIMIT)] = 0.0
        return du

    def with_u(self, u):
        return TrainableTransition(self.C, u=u)


def realize_transition(tt):
    return tt.matrix()


def volmin_vrnl_objective(params, tt, X, labels, alpha, lam, floor=0.0, reference_mean=None):
    """Joint objective for the classifier and a trainable transition matrix.

    The classifier gradient carries the variance-increasing weights; the
    transition gradient is that of ``mean CE + lam * log det`` only.
    Returns ``(objective, grad_params, grad_u, n_clamped, losses)``.
    """
    T_hat = tt.matrix()
    _, logdet = log_det(T_hat)
    head = ForwardHead(T_hat)
    cache = example_losses(params, X, labels, head)
    losses, probs, _ = cache
    w, n_clamped = eq2_weights(losses, alpha, floor, reference_mean)
    _, g_params = weighted_batch_gradient(params, X, labels, w, head, _cache=cache)
    n = len(labels)
    G = head.grad_matrix(probs, labels, np.full(n, 1.0 / n)) + lam * log_det_gradient(T_hat)
    objective = vrnl_empirical_risk(losses, alpha) + lam * logdet
    return objective, g_params, tt.backward(G), n_clamped, losses
