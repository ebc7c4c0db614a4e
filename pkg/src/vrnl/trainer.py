"""Minibatch SGD with momentum, the per-method training pipelines, and the
per-epoch loss-split diagnostics."""

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifier import (CrossEntropyHead, ForwardHead, MLP, example_losses, forward, init_mlp,
                         per_example_ce, weighted_batch_gradient)
from .estimation import DEFAULT_PERCENTILE, estimate_T_anchor
from .noise import relative_error
from .numerics import STREAMS, rng_stream
from .risk import (PosteriorSnapshot, RiskSpec, RunningMean, TrainableTransition, eq2_weights,
                   loss_variance, reweight_factors, volmin_vrnl_objective, vrnl_empirical_risk)

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("epoch", "train_loss", "val_acc", "test_acc", "loss_correct", "loss_incorrect",
                  "loss_var", "clamp_count")
DIAGNOSTIC_COLUMNS = ("epoch", "ce_noisy_correct", "ce_noisy_incorrect", "ce_clean_correct",
                      "ce_clean_incorrect", "eps_T")


class DivergenceError(RuntimeError):
    def __init__(self, epoch, what):
        super().__init__(f"training diverged at epoch {epoch}: {what}")
        self.epoch = epoch


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 80
    lr_drops: tuple = (30, 60)
    drop_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_drops", tuple(int(e) for e in self.lr_drops))
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0 or self.drop_factor <= 0:
            raise ValueError("learning rate, batch size, epochs and drop factor must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight decay must be non-negative")
        drops = self.lr_drops
        if any(b <= a for a, b in zip(drops, drops[1:])) or any(d <= 0 or d >= self.epochs for d in drops):
            raise ValueError(f"lr drops {drops} must be strictly increasing and inside (0, {self.epochs})")

    def lr_at(self, epoch):
        """Learning rate for 0-based ``epoch``; drops take effect after the
        listed (1-based) epochs."""
        n = sum(1 for d in self.lr_drops if epoch >= d)
        return self.lr / self.drop_factor ** n


# -- optimizer ---------------------------------------------------------------

def _arrays(x):
    return x.arrays() if isinstance(x, MLP) else [x]


def _rebuild(like, arrays):
    return MLP(arrays[0::2], arrays[1::2]) if isinstance(like, MLP) else arrays[0]


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """Classical momentum with L2 decay folded into the gradient.

    ``v <- momentum * v + (g + wd * p)``; ``p <- p - lr * v``. ``params`` is an
    :class:`MLP` or a plain array; ``velocity`` is ``None`` on the first step.
    Returns ``(new_params, new_velocity)``.
    """
    ps, gs = _arrays(params), _arrays(grads)
    vs = _arrays(velocity) if velocity is not None else [np.zeros_like(p) for p in ps]
    new_p, new_v = [], []
    for p, g, v in zip(ps, gs, vs):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v = momentum * v + (g + weight_decay * p)
        p = p - lr * v
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("non-finite parameter after SGD step")
        new_p.append(p)
        new_v.append(v)
    return _rebuild(params, new_p), _rebuild(params, new_v)


# -- diagnostics ----------------------------------------------------------------

@dataclass(frozen=True)
class LossSplit:
    correct: float   # None when no example is correctly labeled
    incorrect: float  # None when no example is mislabeled
    variance: float


def split_losses(losses, mislabeled):
    losses = np.asarray(losses, dtype=np.float64)
    bad = np.asarray(mislabeled, dtype=bool)
    good = ~bad
    mean = lambda m: float(losses[m].mean()) if m.any() else None  # noqa: E731
    return LossSplit(mean(good), mean(bad), loss_variance(losses))


def diagnostics_pass(params, dataset, head, beta=None):
    """Mean loss on correctly and incorrectly labeled examples, and the
    population variance of all per-example losses. Read-only."""
    losses, _, _ = example_losses(params, dataset.X, dataset.labels, head)
    if beta is not None:
        losses = beta * losses
    return split_losses(losses, dataset.mislabeled())


def accuracy(params, dataset, labels=None):
    if len(dataset) == 0:
        return float("nan")
    pred = np.argmax(forward(params, dataset.X), axis=1)
    return float(np.mean(pred == (dataset.labels if labels is None else labels)))


# -- reports ---------------------------------------------------------------

@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    best_epoch: int = None
    eps_T: float = None
    stage: str = "main"

    def best_row(self):
        return self.rows[self.best_epoch]

    def to_csv(self, path):
        _write_rows(path, REPORT_COLUMNS, self.rows)

    def diagnostics_to_csv(self, path):
        _write_rows(path, DIAGNOSTIC_COLUMNS, self.diagnostics)

    def column(self, name):
        return [r[name] for r in self.rows]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_report_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    report: TrainReport
    best_params: MLP
    final_params: MLP
    transition: np.ndarray = None   # learned (VolMin) or estimated matrix used
    warmup: TrainReport = None
    beta: np.ndarray = None


# -- training loop -----------------------------------------------------------

def _head_for(risk, T_hat, tt):
    if risk.method in ("forward",):
        return ForwardHead(T_hat)
    if risk.method == "volmin":
        return ForwardHead(tt.matrix())
    return CrossEntropyHead()


def _batch_objective(risk, params, Xb, yb, beta_b, T_hat, tt, ref):
    if risk.method == "volmin":
        obj, grads, g_u, nc, losses = volmin_vrnl_objective(
            params, tt, Xb, yb, risk.alpha, risk.lam, risk.weight_floor, ref)
        return obj, grads, g_u, nc, losses.mean()
    head = _head_for(risk, T_hat, tt)
    cache = example_losses(params, Xb, yb, head)
    vals = cache[0] if beta_b is None else beta_b * cache[0]
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite loss")
    w, nc = eq2_weights(vals, risk.alpha, risk.weight_floor, ref)
    coef = w if beta_b is None else w * beta_b
    _, grads = weighted_batch_gradient(params, Xb, yb, coef, head, _cache=cache)
    return vrnl_empirical_risk(vals, risk.alpha), grads, None, nc, vals.mean()


def train(risk, train_set, val_set, test_set, cfg, params, T_hat=None, beta=None,
          tt=None, true_T=None, stream_tag=0):
    """Run the full SGD schedule for one objective.

    ``params`` is the starting model. ``T_hat`` is required for Forward,
    ``beta`` (one factor per training example) for Reweight, ``tt`` is the
    trainable matrix for VolMin. ``true_T`` only feeds the eps_T diagnostic.
    The best checkpoint is the one with highest accuracy on the (noisy)
    validation labels; ties go to the later epoch, since a small noisy
    validation set often cannot tell a barely trained model from a converged
    one.
    """
    if risk.method == "forward" and T_hat is None:
        raise ValueError("forward correction needs a transition matrix")
    if risk.method == "reweight" and beta is None:
        raise ValueError("reweighting needs importance factors")
    if risk.method == "volmin" and tt is None:
        tt = TrainableTransition(params.n_classes)
    shuffle_rng = rng_stream(cfg.seed, STREAMS["shuffle"] + 16 * stream_tag)
    tracker = RunningMean() if risk.mean_mode == "running" else None
    report = TrainReport(stage="main")
    if true_T is not None and T_hat is not None:
        report.eps_T = relative_error(true_T, T_hat)

    velocity = u_velocity = None
    best_val, best_params = -1.0, params
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        objectives, clamps = [], 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            Xb, yb = train_set.X[idx], train_set.labels[idx]
            ref = tracker.value if tracker is not None else None
            try:
                obj, grads, g_u, nc, batch_mean = _batch_objective(
                    risk, params, Xb, yb, None if beta is None else beta[idx], T_hat, tt, ref)
            except (ValueError, FloatingPointError) as exc:
                if "non-finite" not in str(exc):
                    raise
                raise DivergenceError(epoch, str(exc)) from exc
            if tracker is not None:
                tracker.update(batch_mean)
            if not np.isfinite(obj):
                raise DivergenceError(epoch, "non-finite objective")
            objectives.append(obj)
            clamps += nc
            try:
                params, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
                if risk.method == "volmin":
                    u, u_velocity = sgd_step(tt.u, g_u, u_velocity, lr, cfg.momentum, 0.0)
                    tt = tt.with_u(u)
            except FloatingPointError as exc:
                raise DivergenceError(epoch, str(exc)) from exc

        head = _head_for(risk, T_hat, tt)
        split = diagnostics_pass(params, train_set, head, beta=beta)
        val_acc = accuracy(params, val_set)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(objectives)),
            "val_acc": val_acc,
            "test_acc": accuracy(params, test_set),
            "loss_correct": split.correct,
            "loss_incorrect": split.incorrect,
            "loss_var": split.variance,
            "clamp_count": clamps,
        }
        report.rows.append(row)
        report.diagnostics.append(_ce_diagnostics(epoch, params, train_set, risk, tt, true_T))
        if val_acc >= best_val:
            best_val, best_params, report.best_epoch = val_acc, params, epoch
        log.debug("epoch %d lr %.2g obj %.4f val %.4f test %.4f", epoch, lr, row["train_loss"],
                  val_acc, row["test_acc"])

    if risk.method == "volmin" and true_T is not None:
        report.eps_T = relative_error(true_T, tt.matrix())
    transition = tt.matrix() if risk.method == "volmin" else T_hat
    return TrainResult(report, best_params, params, transition=transition)


def _ce_diagnostics(epoch, params, train_set, risk, tt, true_T):
    """Plain cross-entropy of the model output against noisy and clean labels."""
    probs = forward(params, train_set.X)
    bad = train_set.mislabeled()
    noisy = split_losses(per_example_ce(probs, train_set.labels), bad)
    clean = split_losses(per_example_ce(probs, train_set.clean), bad)
    eps = None
    if risk.method == "volmin" and true_T is not None:
        eps = relative_error(true_T, tt.matrix())
    return {"epoch": epoch, "ce_noisy_correct": noisy.correct, "ce_noisy_incorrect": noisy.incorrect,
            "ce_clean_correct": clean.correct, "ce_clean_incorrect": clean.incorrect, "eps_T": eps}


# -- pipelines ---------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    """Settings around the SGD loop: architecture and transition handling."""

    hidden: tuple = (32, 32)
    warmup_epochs: int = 20
    percentile: float = DEFAULT_PERCENTILE
    transition: str = "estimated"   # estimated | true
    volmin_init: float = -4.0


def warmup(train_set, val_set, test_set, cfg, pipe, n_classes):
    """Plain cross-entropy for ``pipe.warmup_epochs``; the result is both the
    anchor-estimation model and the frozen posterior for reweighting."""
    params = init_mlp([train_set.dim, *pipe.hidden, n_classes], rng_stream(cfg.seed, "init"))
    wcfg = OptimizerConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                           batch_size=cfg.batch_size, epochs=pipe.warmup_epochs,
                           lr_drops=tuple(d for d in cfg.lr_drops if d < pipe.warmup_epochs),
                           drop_factor=cfg.drop_factor, seed=cfg.seed)
    res = train(RiskSpec("ce"), train_set, val_set, test_set, wcfg, params, stream_tag=1)
    res.report.stage = "warmup"
    return res


def fit(risk, train_set, val_set, test_set, cfg, pipe=PipelineConfig(), n_classes=None,
        true_T=None, T_override=None, warm=None):
    """Run the complete pipeline for ``risk.method``.

    Forward and Reweight rely on a plain cross-entropy model trained for
    ``pipe.warmup_epochs``. Its final snapshot estimates the transition matrix
    by anchor points (unless ``T_override`` is given, or ``pipe.transition``
    is ``"true"``). Forward then trains a fresh model through the matrix;
    Reweight keeps optimising the snapshot with importance factors
    ``g_y / (T g)_y`` computed once from it. ``warm`` reuses an earlier
    :func:`warmup` result for the same data and seed.
    """
    C = n_classes or int(max(train_set.labels.max(), val_set.labels.max())) + 1
    sizes = [train_set.dim, *pipe.hidden, C]
    if risk.method in ("ce", "volmin"):
        params = init_mlp(sizes, rng_stream(cfg.seed, "init"))
        tt = TrainableTransition(C, init=pipe.volmin_init) if risk.method == "volmin" else None
        return train(risk, train_set, val_set, test_set, cfg, params, tt=tt, true_T=true_T)

    if T_override is not None:
        T_hat = np.asarray(T_override, dtype=np.float64)
    elif pipe.transition == "true":
        if true_T is None:
            raise ValueError("transition=true needs the true matrix")
        T_hat = np.asarray(true_T, dtype=np.float64)
    else:
        T_hat = None
    if T_hat is None or risk.method == "reweight":
        if warm is None:
            warm = warmup(train_set, val_set, test_set, cfg, pipe, C)
        snapshot = PosteriorSnapshot(warm.final_params)
    if T_hat is None:
        T_hat = np.asarray(estimate_T_anchor(snapshot, train_set.X, pipe.percentile,
                                             labels=train_set.labels))
    if risk.method == "forward":
        params = init_mlp(sizes, rng_stream(cfg.seed, "init"))
        res = train(risk, train_set, val_set, test_set, cfg, params, T_hat=T_hat, true_T=true_T)
    else:
        beta, _ = reweight_factors(snapshot(train_set.X), T_hat, train_set.labels)
        res = train(risk, train_set, val_set, test_set, cfg, snapshot.params.copy(), beta=beta,
                    T_hat=T_hat, true_T=true_T)
        res.beta = beta
    if warm is not None:
        res.warmup = warm.report
    return res


def report_summary(result):
    rep = result.report
    best = rep.best_row()
    final = rep.rows[-1]
    return {
        "best_epoch": rep.best_epoch,
        "best_val_acc": best["val_acc"],
        "best_test_acc": best["test_acc"],
        "final": {k: final[k] for k in REPORT_COLUMNS},
        "eps_T": rep.eps_T,
        "transition": None if result.transition is None else np.asarray(result.transition).tolist(),
    }

