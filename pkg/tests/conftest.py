import os

import numpy as np
import pytest

from vrnl import data, noise
from vrnl.numerics import rng_stream

ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def mnist_dir():
    for d in (os.environ.get("VRNL_MNIST_DIR"),
              os.path.join(os.path.dirname(__file__), os.pardir, "data", "mnist"),
              "/root/data/mnist"):
        if d and os.path.exists(os.path.join(d, "train-images-idx3-ubyte")):
            return os.path.abspath(d)
    return None


def small_splits(seed=0, n=600, rate=0.2, dim=2, C=3, kind="symmetric"):
    spec = data.SyntheticSpec(data.circle_means(C, dim, 2.0), 1.0, n + 400, seed, anchors_per_class=0)
    ds, _ = data.generate_gaussian_mixture(spec)
    pool, test = ds.subset(np.arange(n)), ds.subset(np.arange(n, n + 400))
    T = noise.build(kind, C, rate, seed)
    pool = data.corrupt(pool, T, rng_stream(seed, "corruption"))
    train, val = data.split(pool, 0.1, rng_stream(seed, "split"))
    train, val, test = data.standardize(train, val, test)
    return train, val, test, T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
