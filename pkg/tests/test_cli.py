import csv
import json

import numpy as np
import pytest

from vrnl import experiment
from vrnl.cli import main
from vrnl.noise import load_matrix
from vrnl.trainer import REPORT_COLUMNS

SMALL = ["--set", "n=450", "--set", "n_test=300", "--set", "hidden=16"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_corrupt_writes_matrix_and_dataset(tmp_path):
    out = tmp_path / "c"
    assert main(["corrupt", "--out", str(out), *SMALL, "--set", "noise_rate=0.2"]) == 0
    T = np.asarray(load_matrix(out / "transition.txt"))
    np.testing.assert_allclose(np.diag(T), 0.8, atol=1e-15)
    rows = _rows(out / "dataset.csv")
    assert list(rows[0]) == ["x0", "x1", "clean_label", "noisy_label"]
    echo = json.loads((out / "corrupt.json").read_text())
    assert echo["config"]["noise_rate"] == 0.2 and echo["config"]["lr"] == 0.01


def test_corrupt_zero_rate_and_rerun(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["corrupt", *SMALL, "--set", "noise_rate=0"]
    assert main([*args, "--out", str(a)]) == 0
    assert all(r["clean_label"] == r["noisy_label"] for r in _rows(a / "dataset.csv"))
    assert main([*args, "--out", str(b)]) == 0
    for name in ("dataset.csv", "transition.txt", "corrupt.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_train_forward_vrnl(tmp_path):
    out = tmp_path / "t"
    code = main(["train", "--out", str(out), *SMALL, "--set", "method=forward-vrnl",
                 "--set", "alpha=0.1", "--set", "noise_rate=0.2", "--deterministic"])
    assert code == 0
    rows = _rows(out / "report.csv")
    assert len(rows) == 80 and list(rows[0]) == list(REPORT_COLUMNS)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["alpha"] == 0.1
    assert 0 <= summary["best_epoch"] < 80
    for name in ("diagnostics.csv", "warmup_report.csv", "transition_hat.txt", "checkpoint.npz"):
        assert (out / name).exists()
    assert (out / "transition_hat.txt").read_text().startswith("# anchor estimate")


def test_train_ce_has_no_clamps_and_seeds_differ(tmp_path):
    reports = []
    for seed in (0, 1):
        out = tmp_path / f"s{seed}"
        assert main(["train", "--out", str(out), *SMALL, "--set", "method=ce", "--set", "alpha=0",
                     "--set", "epochs=10", "--set", "lr_drops=5", "--seed", str(seed)]) == 0
        rows = _rows(out / "report.csv")
        assert all(r["clamp_count"] == "0" for r in rows)
        reports.append((out / "report.csv").read_text())
    assert reports[0].splitlines()[0] == reports[1].splitlines()[0]
    assert reports[0] != reports[1]


def test_config_file_override_and_summary_replay(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nmethod = reweight-vrnl\nepochs = 6\nlr_drops = 3\n"
                   "warmup_epochs = 4\nseed = 5\nn = 450\nn_test = 300\nhidden = 16\n")
    out = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--set", "epochs=7", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["epochs"] == 7 and summary["config"]["seed"] == 5
    assert summary["config"]["alpha"] == 0.1
    assert len(_rows(out / "report.csv")) == 7
    replay = tmp_path / "replay"
    experiment.cmd_train(experiment.resolve(summary["config"]), str(replay))
    assert (replay / "report.csv").read_bytes() == (out / "report.csv").read_bytes()


def test_diagnose_emits_loss_split(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), *SMALL, "--set", "epochs=5", "--set", "lr_drops=3",
                 "--set", "method=volmin-vrnl"]) == 0
    assert main(["diagnose", "--run", str(run), "--out", str(tmp_path / "d")]) == 0
    rows = _rows(tmp_path / "d" / "loss_split.csv")
    assert [r["source"] for r in rows] == ["report"] * 5 + ["checkpoint"]
    best = json.loads((run / "summary.json").read_text())["best_epoch"]
    ck, rep = rows[-1], rows[best]
    assert int(ck["epoch"]) == best
    assert float(ck["loss_var"]) == pytest.approx(float(rep["loss_var"]), rel=1e-9)


def test_bias_sweep_zero_gamma_matches_unbiased_run(tmp_path):
    common = [*SMALL, "--set", "epochs=6", "--set", "lr_drops=3", "--set", "warmup_epochs=3",
              "--set", "seeds=0,1", "--set", "noise_rate=0.3"]
    out = tmp_path / "b"
    assert main(["bias-sweep", "--out", str(out), *common, "--set", "gammas=0.1,0"]) == 0
    rows = _rows(out / "bias_sweep.csv")
    keys = [(r["method"], float(r["gamma"]), int(r["seed"])) for r in rows]
    assert keys == sorted(keys) and len(rows) == 8
    zero = [r for r in rows if float(r["gamma"]) == 0.0]
    assert all(float(r["eps_T"]) == 0.0 for r in zero)
    for r in zero:
        ref = tmp_path / f"ref-{r['method']}-{r['seed']}"
        assert main(["train", "--out", str(ref), *common, "--set", f"method={r['method']}",
                     "--set", "transition=true", "--seed", r["seed"]]) == 0
        summary = json.loads((ref / "summary.json").read_text())
        assert float(r["test_acc"]) == summary["best_test_acc"]


def test_default_gamma_grid():
    assert experiment.parse_list(experiment.DEFAULTS["gammas"]) == [0.01, 0.05, 0.10, 0.15]


@pytest.mark.parametrize("bad", [["--set", "method=backward"], ["--set", "noise_rate=0.9"],
                                 ["--set", "bogus=1"], ["--set", "epochs=abc"],
                                 ["--set", "noise"], ["--config", "/nonexistent.cfg"]])
def test_invalid_config_exits_nonzero(tmp_path, bad, capsys):
    assert main(["corrupt", "--out", str(tmp_path / "x"), *bad]) == 1
    assert "vrnl corrupt:" in capsys.readouterr().err


def test_missing_dataset_exits_nonzero(tmp_path):
    code = main(["train", "--out", str(tmp_path / "m"), "--set", "dataset=mnist",
                 "--set", f"mnist_dir={tmp_path / 'nowhere'}"])
    assert code == 1


def test_divergence_exits_nonzero(tmp_path):
    code = main(["train", "--out", str(tmp_path / "d"), *SMALL, "--set", "method=ce",
                 "--set", "lr=1e300", "--set", "epochs=3",
                 "--set", "lr_drops=", "--set", "hidden=32,32"])
    assert code == 1


def test_bias_sweep_rejects_volmin(tmp_path):
    assert main(["bias-sweep", "--out", str(tmp_path / "v"), "--set", "methods=volmin"]) == 1


def test_alpha_defaults():
    assert experiment.default_alpha("forward-vrnl", "symmetric", "synthetic") == 0.1
    assert experiment.default_alpha("reweight-vrnl", "pair", "mnist") == 0.01
    assert experiment.default_alpha("volmin-vrnl", "symmetric", "mnist") == 0.05
    assert experiment.default_alpha("volmin-vrnl", "pair", "mnist") == 0.005
    assert experiment.default_alpha("forward", "symmetric", "synthetic") == 0.0
