import statistics

import numpy as np
import pytest

from vrnl import data, noise
from vrnl.classifier import CrossEntropyHead, example_losses, init_mlp
from vrnl.numerics import rng_stream
from vrnl.risk import RiskSpec
from vrnl.trainer import (REPORT_COLUMNS, DivergenceError, OptimizerConfig, PipelineConfig,
                          diagnostics_pass, fit, read_report_csv, sgd_step, split_losses, train)

from conftest import small_splits

QUICK = OptimizerConfig(epochs=8, lr_drops=(4, 6), batch_size=64, lr=0.05)


def test_sgd_step_examples():
    p, v = sgd_step(np.array([0.5]), np.array([0.0]), None, 0.1, 0.9, 0.0)
    assert p[0] == 0.5
    p, v = sgd_step(np.array([0.0]), np.array([1.0]), None, 0.1, 0.0, 0.0)
    assert p[0] == pytest.approx(-0.1)
    p, v = sgd_step(np.array([0.0]), np.array([1.0]), None, 0.1, 0.9, 0.0)
    assert p[0] == pytest.approx(-0.1)
    p, v = sgd_step(p, np.array([1.0]), v, 0.1, 0.9, 0.0)
    assert v[0] == pytest.approx(1.9) and p[0] == pytest.approx(-0.29)


def test_sgd_step_weight_decay_and_errors():
    p, v = sgd_step(np.array([2.0]), np.array([0.0]), None, 0.1, 0.0, 0.5)
    assert p[0] == pytest.approx(2.0 - 0.1 * 1.0)
    with pytest.raises(FloatingPointError):
        sgd_step(np.array([1.0]), np.array([np.inf]), None, 0.1, 0.0, 0.0)
    with pytest.raises(ValueError):
        sgd_step(np.zeros(2), np.zeros(3), None, 0.1, 0.0, 0.0)


def test_sgd_step_on_mlp_keeps_structure():
    params = init_mlp((3, 4, 2), rng_stream(0, "init"))
    new, vel = sgd_step(params, params.zeros_like(), None, 0.1, 0.9, 0.0)
    assert new.checksum() == params.checksum()
    assert vel.sizes == params.sizes


def test_lr_schedule():
    cfg = OptimizerConfig()
    assert [cfg.lr_at(e) for e in (0, 29, 30, 59, 60, 79)] == pytest.approx(
        [1e-2, 1e-2, 1e-3, 1e-3, 1e-4, 1e-4])


@pytest.mark.parametrize("kw", [dict(lr=0), dict(batch_size=0), dict(lr_drops=(60, 30)),
                                dict(lr_drops=(90,)), dict(momentum=-0.1)])
def test_optimizer_config_validation(kw):
    with pytest.raises(ValueError):
        OptimizerConfig(**kw)


def test_split_losses_examples():
    s = split_losses([1.0, 2.0, 3.0, 4.0], [False, False, True, True])
    assert (s.correct, s.incorrect) == (1.5, 3.5)
    s = split_losses([1.0, 2.0], [False, False])
    assert s.incorrect is None and s.correct == 1.5


def test_diagnostics_pass_without_noise_and_read_only():
    train_set, _, _, _ = small_splits(rate=0.0)
    params = init_mlp((2, 8, 3), rng_stream(0, "init"))
    before = params.checksum()
    s = diagnostics_pass(params, train_set, CrossEntropyHead())
    assert s.incorrect is None
    assert params.checksum() == before


def test_report_variance_matches_two_pass_oracle():
    train_set, val, test, T = small_splits(seed=2)
    res = fit(RiskSpec("forward", alpha=0.1), train_set, val, test, QUICK,
              PipelineConfig(hidden=(16,), transition="true"), 3, true_T=T)
    losses, _, _ = example_losses(res.final_params, train_set.X, train_set.labels,
                                  __import__("vrnl").risk.forward_loss_head(T))
    oracle = statistics.pvariance([float(v) for v in losses])
    assert abs(res.report.rows[-1]["loss_var"] - oracle) <= 1e-10


def test_report_rows_complete_and_csv(tmp_path):
    train_set, val, test, T = small_splits(seed=1)
    res = fit(RiskSpec("reweight", alpha=0.1), train_set, val, test, QUICK,
              PipelineConfig(hidden=(16,), warmup_epochs=3), 3, true_T=T)
    rows = res.report.rows
    assert [r["epoch"] for r in rows] == list(range(8))
    assert all(0 <= r["val_acc"] <= 1 and 0 <= r["test_acc"] <= 1 for r in rows)
    assert res.beta.shape == (len(train_set),)
    path = tmp_path / "r.csv"
    res.report.to_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(REPORT_COLUMNS)
    back = read_report_csv(path)
    assert len(back) == 8
    assert res.warmup is not None and len(res.warmup.rows) == 3


def test_training_is_deterministic(tmp_path):
    train_set, val, test, T = small_splits(seed=3)
    paths = []
    for k in range(2):
        res = fit(RiskSpec("volmin", alpha=0.05), train_set, val, test, QUICK,
                  PipelineConfig(hidden=(16,)), 3, true_T=T)
        paths.append(tmp_path / f"{k}.csv")
        res.report.to_csv(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_objective_descends_and_volmin_matrix_valid():
    train_set, val, test, T = small_splits(seed=4)
    res = fit(RiskSpec("volmin", alpha=0.05), train_set, val, test, QUICK,
              PipelineConfig(hidden=(16,)), 3, true_T=T)
    obj = res.report.column("train_loss")
    assert obj[5] < obj[0]
    m = np.asarray(res.transition)
    assert np.max(np.abs(m.sum(axis=0) - 1)) <= 1e-12
    assert res.report.eps_T is not None


def test_running_mean_mode_trains():
    train_set, val, test, T = small_splits(seed=5)
    res = fit(RiskSpec("forward", alpha=0.1, mean_mode="running"), train_set, val, test,
              QUICK, PipelineConfig(hidden=(16,), transition="true"), 3, true_T=T)
    obj = res.report.column("train_loss")
    assert obj[-1] < obj[0]


def test_divergence_reports_epoch():
    train_set, val, test, T = small_splits(seed=0)
    cfg = OptimizerConfig(lr=1e6, momentum=0.99, epochs=5, lr_drops=(), batch_size=32)
    with pytest.raises(DivergenceError) as err:
        fit(RiskSpec("ce"), train_set, val, test, cfg, PipelineConfig(hidden=(32, 32)), 3)
    assert "epoch" in str(err.value)


def test_method_inputs_required():
    train_set, val, test, _ = small_splits()
    params = init_mlp((2, 4, 3), rng_stream(0, "init"))
    with pytest.raises(ValueError):
        train(RiskSpec("forward"), train_set, val, test, QUICK, params)
    with pytest.raises(ValueError):
        train(RiskSpec("reweight"), train_set, val, test, QUICK, params)


def _memorization_splits(seed=0):
    spec = data.SyntheticSpec(data.circle_means(3, 50, 2.0), 1.0, 900, seed, anchors_per_class=0)
    ds, _ = data.generate_gaussian_mixture(spec)
    pool, test = ds.subset(np.arange(400)), ds.subset(np.arange(400, 900))
    T = noise.build_symmetric(3, 0.3)
    pool = data.corrupt(pool, T, rng_stream(seed, "corruption"))
    train_set, val = data.split(pool, 0.1, rng_stream(seed, "split"))
    return (*data.standardize(train_set, val, test), T)


MEM_CFG = OptimizerConfig(lr=0.05, epochs=80, lr_drops=(), batch_size=128)
MEM_PIPE = PipelineConfig(hidden=(256, 256), transition="true")


@pytest.mark.slow
def test_ce_memorizes_mislabeled_examples():
    train_set, val, test, T = _memorization_splits()
    res = fit(RiskSpec("ce"), train_set, val, test, MEM_CFG, MEM_PIPE, 3, true_T=T)
    bad = res.report.column("loss_incorrect")
    assert bad[-1] < bad[0]
    assert all(c == 0 for c in res.report.column("clamp_count"))


@pytest.mark.slow
def test_vrnl_keeps_mislabeled_losses_high():
    train_set, val, test, T = _memorization_splits()
    base = fit(RiskSpec("forward", alpha=0.0), train_set, val, test, MEM_CFG, MEM_PIPE, 3,
               true_T=T).report.rows[-1]
    vrnl = fit(RiskSpec("forward", alpha=0.1), train_set, val, test, MEM_CFG, MEM_PIPE, 3,
               true_T=T).report.rows[-1]
    assert vrnl["loss_incorrect"] > base["loss_incorrect"]
    ratio = vrnl["loss_correct"] / base["loss_correct"]
    assert 0.5 < ratio < 2.0
