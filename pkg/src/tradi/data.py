"""Datasets: synthetic GP regression, UCI CSVs, MNIST IDX files and OOD image folders."""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, NumericError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GP_NOISE_VAR = 0.3
GP_SIGNAL_VAR = 1.0


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    in_dist: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.features.shape[0] != self.targets.shape[0]:
            raise DataFormatError(f"{self.features.shape[0]} feature rows but {self.targets.shape[0]} targets")
        if self.in_dist is None:
            self.in_dist = np.ones(len(self.targets), dtype=bool)

    def __len__(self):
        return self.targets.shape[0]

    def subset(self, idx):
        return Dataset(self.features[idx], self.targets[idx], self.in_dist[idx], self.name, dict(self.meta))


def data_dir():
    return Path(os.environ.get("TRADI_DATA_DIR", "data"))


# --- synthetic GP --------------------------------------------------------------

def rbf_gram(a, b, variance=GP_SIGNAL_VAR, lengthscale=1.0):
    d = np.subtract.outer(np.asarray(a, float), np.asarray(b, float))
    return variance * np.exp(-0.5 * d * d / lengthscale ** 2)


def sample_gp(x, rng, variance=GP_SIGNAL_VAR, lengthscale=1.0, size=None):
    """Draws of ``f ~ GP(0, RBF)`` at points ``x`` via a jittered Cholesky factor."""
    K = rbf_gram(x, x, variance, lengthscale)
    eye = np.eye(len(x))
    jitter = 1e-10
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * eye)
            break
        except np.linalg.LinAlgError:
            jitter *= 10
            if jitter > 1e-4:
                raise NumericError("GP Gram matrix is not positive definite")
    shape = (len(x),) if size is None else (len(x), size)
    return L @ rng.standard_normal(shape)


def synth_gp(n_train=20, n_test=200, seed=0, train_range=(-2.0, 2.0), test_range=(-6.0, 6.0),
             noise_var=GP_NOISE_VAR):
    """One GP sample path observed with Gaussian noise.

    Training inputs are uniform in ``train_range``; test inputs form a grid
    over the wider ``test_range`` so extrapolation can be inspected.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError("need at least one training and one test point")
    rng = np.random.default_rng(seed)
    x_train = np.sort(rng.uniform(*train_range, size=n_train))
    x_test = np.linspace(*test_range, n_test)
    x = np.r_[x_train, x_test]
    f = sample_gp(x, rng)
    y = f + rng.normal(0.0, np.sqrt(noise_var), size=f.shape)
    meta = {"train_range": list(train_range), "test_range": list(test_range), "noise_var": noise_var}
    train = Dataset(x_train[:, None], y[:n_train], name="gp_train", meta=meta)
    test = Dataset(x_test[:, None], y[n_train:], name="gp_test", meta={**meta, "f": f[n_train:].tolist()})
    return train, test


def write_xy_csv(path, ds):
    np.savetxt(path, np.c_[ds.features[:, 0], ds.targets], delimiter=",", header="x,y", comments="")


# --- UCI -----------------------------------------------------------------------

def uci_load(path, target_column=-1, name=None):
    """Numeric CSV or whitespace-separated table; a non-numeric first row is a header."""
    path = Path(path)
    try:
        lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise DataFormatError(f"{path} is empty")
    sep = "," if "," in lines[0] else None
    rows = [ln.split(sep) for ln in lines]
    header = None
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        header, rows = rows[0], rows[1:]
    width = len(rows[0]) if rows else 0
    data = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DataFormatError(f"{path}: row {r + 1} has {len(row)} columns, expected {width}")
        for c, cell in enumerate(row):
            try:
                data[r, c] = float(cell)
            except ValueError:
                raise DataFormatError(f"{path}: non-numeric cell {cell!r} at row {r + 1}, column {c + 1}") from None
    if isinstance(target_column, str):
        if header is None or target_column not in [h.strip() for h in header]:
            raise DataFormatError(f"{path}: no column named {target_column!r}")
        target_column = [h.strip() for h in header].index(target_column)
    tc = target_column % width
    feats = np.delete(data, tc, axis=1)
    return Dataset(feats, data[:, tc], name=name or path.stem, meta={"path": str(path), "header": header})


@dataclass
class FoldPlan:
    train: list
    test: list
    seed: int

    def __len__(self):
        return len(self.train)


def make_folds(n, n_folds=20, seed=0, test_fraction=0.1):
    """Random train/test splits (90/10 by default), one permutation per fold."""
    n = len(n) if hasattr(n, "__len__") else int(n)
    if n < 2:
        raise ConfigError("need at least two rows to split")
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(n * test_fraction)))
    train, test = [], []
    for _ in range(n_folds):
        perm = rng.permutation(n)
        test.append(np.sort(perm[:n_test]))
        train.append(np.sort(perm[n_test:]))
    return FoldPlan(train, test, seed)


# --- MNIST IDX -----------------------------------------------------------------

def _open(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    return gzip.open(path, "rb") if path.suffix == ".gz" else path.open("rb")


def read_idx(path, expected_magic):
    """Parse an IDX file: big-endian magic, big-endian u32 dims, raw unsigned bytes."""
    try:
        with _open(path) as f:
            raw = f.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) != count:
        raise DataFormatError(f"{path}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def mnist_load(images_path, labels_path, in_dist=True, name="mnist"):
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    flags = np.full(len(labels), bool(in_dist))
    return Dataset(x, labels.astype(np.int64), flags, name, {"image_shape": list(images.shape[1:])})


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def mnist_split(root, split, in_dist=True, name="mnist"):
    img, lab = MNIST_FILES[split]
    return mnist_load(Path(root) / img, Path(root) / lab, in_dist=in_dist, name=name)


def ood_folder_load(path, size=(28, 28), name="ood"):
    """Every decodable image under ``path``, grayscale, resized, flagged OOD."""
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    files = sorted(p for p in root.rglob("*") if p.is_file()) if root.exists() else []
    images, skipped = [], 0
    for p in files:
        try:
            with Image.open(p) as im:
                im = im.convert("L")
                if im.size != size:
                    im = im.resize(size)
                images.append(np.asarray(im, dtype=np.float64).ravel() / 255.0)
        except (UnidentifiedImageError, OSError, ValueError):
            skipped += 1
    if skipped:
        log.warning("skipped %d undecodable files under %s", skipped, root)
    n = len(images)
    x = np.stack(images) if n else np.zeros((0, size[0] * size[1]))
    return Dataset(x, np.full(n, -1, dtype=np.int64), np.zeros(n, dtype=bool), name, {"skipped": skipped})


def digits_load(classes=range(10), in_dist=True, size=(28, 28)):
    """scikit-learn's 8x8 digits upsampled to ``size``: a bundled offline stand-in for MNIST."""
    from sklearn.datasets import load_digits

    d = load_digits()
    keep = np.isin(d.target, list(classes))
    imgs = d.images[keep] / 16.0
    ry = np.linspace(0, 7, size[0]).round().astype(int)
    rx = np.linspace(0, 7, size[1]).round().astype(int)
    up = imgs[:, ry][:, :, rx]
    n = up.shape[0]
    return Dataset(up.reshape(n, -1), d.target[keep].astype(np.int64), np.full(n, bool(in_dist)), "digits")
