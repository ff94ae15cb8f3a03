"""Synthetic shift generators, IDX ingestion, splits, and batch iteration.

Target training labels are sealed behind a counting gate: nothing on the
training path can reach them, and every read (there should be none) is
recorded. Source and target batches are always drawn and returned
separately, never concatenated.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

SOURCE = "source"
TARGET = "target"
HOLDOUT_CAP = 1000


class IdxFormatError(ValueError):
    """Malformed IDX payload."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Labeled feature matrix for one domain."""

    features: Tensor
    labels: np.ndarray
    domain: str
    num_classes: int

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if len(labels) != self.features.rows:
            raise ValueError(f"{len(labels)} labels for {self.features.rows} rows")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.features.rows


@dataclass(frozen=True)
class UnlabeledDataset:
    """Feature matrix with no label accessor at all."""

    features: Tensor
    domain: str

    def __len__(self):
        return self.features.rows


class LabelGate:
    """Holds sealed labels; every read is counted for later audit."""

    def __init__(self, labels):
        self._labels = np.ascontiguousarray(labels, dtype=np.int64)
        self._labels.flags.writeable = False
        self.access_count = 0

    def read(self):
        self.access_count += 1
        return self._labels


@dataclass
class DomainPair:
    """Labeled source plus a target carved into sealed-train/holdout/test."""

    source: Dataset
    target_train: UnlabeledDataset
    target_train_gate: LabelGate = field(repr=False)
    target_holdout: Dataset
    target_test: Dataset

    @property
    def input_dim(self):
        return self.source.features.cols

    @property
    def num_classes(self):
        return self.source.num_classes


def gen_two_moons(n, noise_std, rotation_deg, seed, domain=SOURCE):
    """Two interleaved half circles, rotated about the origin after noising."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    n0 = n - n // 2
    n1 = n // 2
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    pts = np.vstack([upper, lower]) + rng.normal(0.0, noise_std, (n, 2))
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    order = rng.permutation(n)
    theta = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]])
    return Dataset(Tensor(pts[order] @ rot), labels[order], domain, num_classes=2)


def gauss_class_means(num_classes, dim, seed, spread=2.0):
    """Deterministic class-mean matrix shared by gen_gauss_shift and its tests."""
    return np.random.default_rng(seed).normal(0.0, spread, (num_classes, dim))


def gen_gauss_shift(n, num_classes, dim, mean_shift_vec, scale, seed, spread=2.0):
    """Class-conditional Gaussian pair; target means translated, covariance scaled.

    Features are left raw (no standardization) so the configured means and
    scales are directly observable. The target side is split with the usual
    holdout rule.
    """
    shift = np.zeros(dim) if mean_shift_vec is None else np.asarray(mean_shift_vec, dtype=float)
    if shift.shape != (dim,):
        raise ValueError(f"shift vector must have length {dim}")
    means = gauss_class_means(num_classes, dim, seed, spread)
    sample_seed, split_seed = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(sample_seed)

    def sample(center_rows, sigma, count):
        per = count // num_classes
        counts = [per + (1 if c < count - per * num_classes else 0) for c in range(num_classes)]
        feats, labels = [], []
        for c, k in enumerate(counts):
            feats.append(rng.normal(0.0, sigma, (k, dim)) + center_rows[c])
            labels.append(np.full(k, c, dtype=np.int64))
        x = np.vstack(feats)
        y = np.concatenate(labels)
        order = rng.permutation(count)
        return x[order], y[order]

    xs, ys = sample(means, 1.0, n)
    xt, yt = sample(means + shift, float(scale), n)
    source = Dataset(Tensor(xs), ys, SOURCE, num_classes)
    return _split_target(source, xt, yt, num_classes, rng=np.random.default_rng(split_seed))


def load_idx(images_path, labels_path, domain=SOURCE, downscale=True):
    """Parse big-endian IDX image/label files into a Dataset.

    Pixels are scaled to [0, 1] and flattened row-major; when `downscale` is
    set and the image exceeds 196 pixels, a single 2x mean-pool is applied.
    """
    with open(images_path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise IdxTruncatedError(f"image header truncated in {images_path}")
        magic, count, rows, cols = struct.unpack(">4I", header)
        if magic != 0x00000803:
            raise IdxMagicError(f"expected image magic 0x00000803, got {magic:#010x}")
        payload = fh.read(count * rows * cols)
    if len(payload) != count * rows * cols:
        raise IdxTruncatedError(
            f"image payload truncated: expected {count * rows * cols} bytes, got {len(payload)}")

    with open(labels_path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise IdxTruncatedError(f"label header truncated in {labels_path}")
        magic, label_count = struct.unpack(">2I", header)
        if magic != 0x00000801:
            raise IdxMagicError(f"expected label magic 0x00000801, got {magic:#010x}")
        raw_labels = fh.read(label_count)
    if len(raw_labels) != label_count:
        raise IdxTruncatedError(
            f"label payload truncated: expected {label_count} bytes, got {len(raw_labels)}")
    if label_count != count:
        raise IdxCountMismatchError(f"{count} images but {label_count} labels")

    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols) / 255.0
    if downscale and rows * cols > 196 and rows % 2 == 0 and cols % 2 == 0:
        images = images.reshape(count, rows // 2, 2, cols // 2, 2).mean(axis=(2, 4))
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if count else 1
    return Dataset(Tensor(images.reshape(count, -1)), labels, domain, num_classes)


def _standardize(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (x - mu) / sd


def _split_target(source, xt, yt, num_classes, rng, test_frac=1.0 / 3.0,
                  holdout_cap=HOLDOUT_CAP):
    n = len(xt)
    n_test = max(1, round(n * test_frac))
    n_hold = min(holdout_cap, (n - n_test) // 2)
    if n - n_test - n_hold < 1 or n_hold < 1:
        raise ValueError(f"target set of {n} too small to split")
    perm = rng.permutation(n)
    test_idx, hold_idx = perm[:n_test], perm[n_test:n_test + n_hold]
    train_idx = perm[n_test + n_hold:]
    return DomainPair(
        source=source,
        target_train=UnlabeledDataset(Tensor(xt[train_idx]), TARGET),
        target_train_gate=LabelGate(yt[train_idx]),
        target_holdout=Dataset(Tensor(xt[hold_idx]), yt[hold_idx], TARGET, num_classes),
        target_test=Dataset(Tensor(xt[test_idx]), yt[test_idx], TARGET, num_classes),
    )


def preprocess_pair(source, target, seed=0, test_frac=1.0 / 3.0, holdout_cap=HOLDOUT_CAP):
    """Standardize per domain, reconcile dimensions, and split the target.

    Each domain is standardized with its own statistics only. When feature
    widths differ the narrower side is zero-padded to match; a zero-width
    side is irreconcilable.
    """
    xs = _standardize(source.features.data)
    xt = _standardize(target.features.data)
    if xs.shape[1] == 0 or xt.shape[1] == 0:
        raise ValueError("cannot reconcile a zero-dimensional feature space")
    width = max(xs.shape[1], xt.shape[1])
    xs = np.pad(xs, ((0, 0), (0, width - xs.shape[1])))
    xt = np.pad(xt, ((0, 0), (0, width - xt.shape[1])))
    if source.num_classes != target.num_classes:
        raise ValueError("source and target must share a label space")
    src = Dataset(Tensor(xs), source.labels, SOURCE, source.num_classes)
    rng = np.random.default_rng(seed)
    return _split_target(src, xt, target.labels, target.num_classes, rng,
                         test_frac=test_frac, holdout_cap=holdout_cap)


@dataclass(frozen=True)
class LabeledBatch:
    x: Tensor
    y: np.ndarray


class BatchIterator:
    """Per-domain epoch shuffling; a target batch is a bare feature tensor."""

    def __init__(self, pair, batch_size, seed):
        if batch_size > len(pair.source) or batch_size > len(pair.target_train):
            raise ValueError(f"batch size {batch_size} exceeds a split size")
        self._pair = pair
        self._batch = batch_size
        self._rng = np.random.default_rng(seed)
        self._src_perm = self._rng.permutation(len(pair.source))
        self._tgt_perm = self._rng.permutation(len(pair.target_train))
        self._src_pos = 0
        self._tgt_pos = 0

    def next_source(self):
        idx, self._src_perm, self._src_pos = self._draw(
            self._src_perm, self._src_pos, len(self._pair.source))
        feats = self._pair.source.features.data[idx]
        return LabeledBatch(Tensor(feats), self._pair.source.labels[idx])

    def next_target(self):
        idx, self._tgt_perm, self._tgt_pos = self._draw(
            self._tgt_perm, self._tgt_pos, len(self._pair.target_train))
        return Tensor(self._pair.target_train.features.data[idx])

    def next(self):
        return self.next_source(), self.next_target()

    def _draw(self, perm, pos, n):
        if pos >= n:
            perm = self._rng.permutation(n)
            pos = 0
        idx = perm[pos:pos + self._batch]
        return idx, perm, pos + len(idx)
