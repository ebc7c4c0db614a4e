"""Datasets: a Gaussian-mixture generator with exact posteriors, MNIST IDX
files, and noisy-label aware splitting."""

import csv
import gzip
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .noise import corrupt_labels
from .numerics import rng_stream, stable_softmax

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
ANCHOR_TOL = 1e-10


@dataclass(frozen=True)
class LabeledDataset:
    """Features with observed labels.

    ``clean`` holds the pre-corruption labels when they are known. They are
    kept for diagnostics only; nothing in the training objectives reads them.
    """

    X: np.ndarray
    labels: np.ndarray
    clean: np.ndarray = None
    corrupted: bool = False
    anchor: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.X) != len(self.labels):
            raise ValueError(f"{len(self.X)} feature rows but {len(self.labels)} labels")
        if self.clean is not None and len(self.clean) != len(self.labels):
            raise ValueError("clean labels must align with observed labels")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.X.shape[1]

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return replace(self, X=self.X[idx], labels=self.labels[idx], clean=pick(self.clean),
                       anchor=pick(self.anchor))

    def mislabeled(self):
        if self.clean is None:
            raise ValueError("clean labels unavailable")
        return self.labels != self.clean


def corrupt(dataset, T, rng):
    """Replace the observed labels with draws from ``T``; remember the clean ones."""
    if dataset.corrupted:
        raise ValueError("dataset is already corrupted")
    noisy = corrupt_labels(dataset.labels, T, rng)
    return replace(dataset, labels=noisy, clean=dataset.labels.copy(), corrupted=True)


def split(dataset, val_fraction, rng, require_corrupted=True):
    """Shuffle then cut off ``val_fraction`` as a validation set.

    Noisy-label experiments corrupt before splitting so that validation
    labels are noisy too; splitting clean data for them is refused.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if require_corrupted and not dataset.corrupted:
        raise ValueError("corrupt labels before splitting off a validation set")
    perm = rng.permutation(len(dataset))
    n_val = int(round(val_fraction * len(dataset)))
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def subsample(dataset, n, rng):
    if n >= len(dataset):
        return dataset
    return dataset.subset(np.sort(rng.choice(len(dataset), size=n, replace=False)))


def standardize(train, *others):
    """Per-feature standardisation with statistics from ``train`` only."""
    mu = train.X.mean(axis=0)
    sd = train.X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    out = [replace(d, X=(d.X - mu) / sd) for d in (train, *others)]
    return out if others else out[0]


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    means: np.ndarray
    scale: float = 1.0
    n: int = 3000
    seed: int = 0
    anchors_per_class: int = 1

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if means.shape[0] < 2:
            raise ValueError("need at least two class means")
        if len({m.tobytes() for m in means}) != len(means):
            raise ValueError("class means must be distinct")
        if self.scale <= 0:
            raise ValueError("covariance scale must be positive")
        object.__setattr__(self, "means", means)

    @property
    def C(self):
        return self.means.shape[0]

    @property
    def d(self):
        return self.means.shape[1]


def circle_means(C, d=2, radius=2.0):
    """``C`` means evenly spaced on a circle in the first two coordinates."""
    if d < 2:
        raise ValueError("need d >= 2")
    ang = 2.0 * np.pi * np.arange(C) / C
    means = np.zeros((C, d))
    means[:, 0] = radius * np.cos(ang)
    means[:, 1] = radius * np.sin(ang)
    return means


class GaussianOracle:
    """Exact clean posterior of an equal-prior isotropic Gaussian mixture."""

    def __init__(self, means, scale):
        self.means = np.asarray(means, dtype=np.float64)
        self.scale = float(scale)

    def __call__(self, X):
        X = np.atleast_2d(X)
        sq = ((X[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        return stable_softmax(-sq / (2.0 * self.scale ** 2))


def _anchor_points(oracle, means, k, count):
    direction = means[k] - means.mean(axis=0)
    norm = np.linalg.norm(direction)
    direction = direction / norm if norm > 0 else np.eye(means.shape[1])[0]
    t = oracle.scale
    while oracle(means[k] + t * direction)[0, k] < 1.0 - ANCHOR_TOL / 10:
        t *= 1.5
    return np.array([means[k] + t * (1.0 + 0.1 * i) * direction for i in range(count)])


def generate_gaussian_mixture(spec):
    """Sample ``spec.n`` points with balanced classes plus planted anchors.

    Returns ``(dataset, oracle)`` where ``oracle(X)`` is the exact clean
    posterior. Anchors are appended at the end and flagged in
    ``dataset.anchor``; the oracle posterior there is one-hot to 1e-10.
    """
    rng = rng_stream(spec.seed, "data")
    labels = rng.permutation(np.arange(spec.n) % spec.C)
    X = spec.means[labels] + spec.scale * rng.standard_normal((spec.n, spec.d))
    oracle = GaussianOracle(spec.means, spec.scale)
    anchor = np.zeros(spec.n, dtype=bool)
    if spec.anchors_per_class:
        pts = [_anchor_points(oracle, spec.means, k, spec.anchors_per_class) for k in range(spec.C)]
        X = np.vstack([X, *pts])
        labels = np.concatenate([labels, np.repeat(np.arange(spec.C), spec.anchors_per_class)])
        anchor = np.concatenate([anchor, np.ones(spec.C * spec.anchors_per_class, dtype=bool)])
    return LabeledDataset(X, labels.astype(np.int64), anchor=anchor), oracle


# -- IDX files --------------------------------------------------------------

def _open(path, mode="rb"):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path, expected_magic):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    body = raw[header:]
    if len(body) < size:
        raise ValueError(f"{path}: truncated, expected {size} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=size).reshape(dims)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path):
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(X, labels.astype(np.int64))


def export_csv(path, dataset):
    if dataset.clean is None:
        clean, noisy = dataset.labels, dataset.labels
    else:
        clean, noisy = dataset.clean, dataset.labels
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dataset.dim)] + ["clean_label", "noisy_label"])
        for x, c, y in zip(dataset.X, clean, noisy):
            w.writerow([repr(float(v)) for v in x] + [int(c), int(y)])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array(rows[1:], dtype=object)
    X = body[:, :-2].astype(np.float64)
    clean = body[:, -2].astype(np.int64)
    noisy = body[:, -1].astype(np.int64)
    return LabeledDataset(X, noisy, clean=clean, corrupted=True)
