"""Dataset ingestion: CIFAR-10 binary batches, FER-style CSV, seeded synthetic task."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = "test_batch.bin"
SPLITS = ("train", "val", "test")
# template rms; at sigma=0.5 this keeps the nearest-template ceiling near 100%
# while leaving a single binary tentacle well short of it
SYNTH_CONTRAST = 0.2


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Samples (N x C x H x W float32), integer labels and one split tag per sample."""

    x: np.ndarray
    y: np.ndarray
    split: np.ndarray
    classes: int
    provenance: str = ""
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1, np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(1, np.float32))

    def __post_init__(self):
        if not (len(self.x) == len(self.y) == len(self.split)):
            raise DatasetError("samples, labels and split tags differ in length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise DatasetError("label out of range")

    def subset(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.split == tag
        return self.x[m], self.y[m]

    def has(self, tag: str) -> bool:
        return bool(np.any(self.split == tag))

    def __len__(self):
        return len(self.y)


def standardize(x: np.ndarray, split: np.ndarray):
    """Per-channel zero mean / unit variance with constants from the train split."""
    train = x[split == "train"]
    mean = train.mean(axis=(0, 2, 3)).astype(np.float32)
    std = train.std(axis=(0, 2, 3)).astype(np.float32)
    std[std == 0] = 1
    return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32), mean, std


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary batch -> (uint8 N x 3 x 32 x 32, uint8 labels)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DatasetError(f"truncated batch: {path} has {raw.size} bytes")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetError(f"corrupt record {bad[0]} in {path}: label {labels[bad[0]]}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(directory, expected_records: int | None = 10000) -> Dataset:
    d = Path(directory)
    xs, ys, tags = [], [], []
    for name, tag in [(n, "train") for n in CIFAR_TRAIN] + [(CIFAR_TEST, "test")]:
        path = d / name
        if not path.exists():
            raise DatasetError(f"missing {path}")
        if expected_records is not None and path.stat().st_size != expected_records * CIFAR_RECORD:
            raise DatasetError(f"truncated batch: {path}")
        x, y = read_cifar10_batch(path)
        xs.append(x)
        ys.append(y)
        tags.append(np.full(len(y), tag))
    x = np.concatenate(xs).astype(np.float32) / 255.0
    split = np.concatenate(tags)
    x, mean, std = standardize(x, split)
    return Dataset(
        x, np.concatenate(ys).astype(np.int64), split, 10,
        provenance=f"cifar10:{d} mean={mean.tolist()} std={std.tolist()}", mean=mean, std=std,
    )


USAGE_SPLIT = {"training": "train", "publictest": "val", "privatetest": "test"}


def parse_grayscale_csv(path, height: int = 48, width: int = 48):
    """Rows of (label, space-separated pixels, usage) -> raw uint8 pixels, labels, split tags."""
    pixels, labels, tags = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise DatasetError(f"{path} row {i}: expected label,pixels[,usage]")
            vals = row[1].split()
            if len(vals) != height * width:
                raise DatasetError(
                    f"{path} row {i}: expected {height * width} pixels, got {len(vals)}"
                )
            try:
                pixels.append(np.array(vals, dtype=np.int64))
                labels.append(int(row[0]))
            except ValueError as exc:
                raise DatasetError(f"{path} row {i}: {exc}") from exc
            usage = row[2].strip().lower() if len(row) > 2 else "training"
            if usage not in USAGE_SPLIT:
                raise DatasetError(f"{path} row {i}: unknown usage tag {row[2]!r}")
            tags.append(USAGE_SPLIT[usage])
    if not pixels:
        raise DatasetError(f"{path}: no data rows")
    px = np.stack(pixels)
    if px.min() < 0 or px.max() > 255:
        raise DatasetError(f"{path}: pixel values outside 0..255")
    return px.astype(np.uint8).reshape(-1, 1, height, width), np.array(labels), np.array(tags)


SPLIT_USAGE = {"train": "Training", "val": "PublicTest", "test": "PrivateTest"}


def write_grayscale_csv(path, pixels: np.ndarray, labels, tags) -> None:
    """Inverse of parse_grayscale_csv for uint8 pixels."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["emotion", "pixels", "Usage"])
        for px, lab, tag in zip(pixels, labels, tags):
            w.writerow([int(lab), " ".join(map(str, px.ravel().tolist())), SPLIT_USAGE[tag]])


def load_grayscale_csv(path, height: int = 48, width: int = 48, classes: int | None = None) -> Dataset:
    px, labels, tags = parse_grayscale_csv(path, height, width)
    classes = classes or int(labels.max()) + 1
    x, mean, std = standardize(px.astype(np.float32) / 255.0, tags)
    return Dataset(
        x, labels.astype(np.int64), tags, max(classes, 2),
        provenance=f"csv:{path} mean={mean.tolist()} std={std.tolist()}", mean=mean, std=std,
    )


def synth_templates(seed: int, classes: int, channels: int, h: int, w: int, contrast: float = SYNTH_CONTRAST):
    """Fixed per-class spatial templates: smoothed Gaussian fields rescaled to ``contrast`` rms."""
    rng = np.random.default_rng([seed, 0])
    t = rng.normal(size=(classes, channels, h + 2, w + 2))
    # 3x3 box blur gives the templates some spatial structure
    t = sum(t[:, :, i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0
    t = t / t.std(axis=(1, 2, 3), keepdims=True) * contrast
    return t.astype(np.float32)


def synth_dataset(
    seed: int = 0,
    classes: int = 3,
    channels: int = 1,
    h: int = 16,
    w: int = 16,
    n_train: int = 3000,
    n_test: int = 600,
    sigma: float = 0.5,
    contrast: float = SYNTH_CONTRAST,
) -> Dataset:
    """Balanced template-plus-noise classification task; deterministic in ``seed``."""
    if classes < 2:
        raise ValueError("need at least two classes")
    templates = synth_templates(seed, classes, channels, h, w, contrast)
    rng = np.random.default_rng([seed, 1])
    n = n_train + n_test
    y = np.arange(n) % classes
    y[:n_train] = rng.permutation(y[:n_train])
    y[n_train:] = rng.permutation(y[n_train:])
    noise = rng.normal(0.0, sigma, size=(n, channels, h, w)).astype(np.float32)
    x = templates[y] + noise
    split = np.array(["train"] * n_train + ["test"] * n_test)
    return Dataset(
        x.astype(np.float32), y.astype(np.int64), split, classes,
        provenance=f"synth:seed={seed},C={classes},shape={channels}x{h}x{w},sigma={sigma},contrast={contrast}",
        mean=np.zeros(channels, np.float32), std=np.ones(channels, np.float32),
    )


def nearest_template_accuracy(ds: Dataset, templates: np.ndarray, tag: str = "test") -> float:
    x, y = ds.subset(tag)
    d = ((x[:, None] - templates[None]) ** 2).sum(axis=(2, 3, 4))
    return 100.0 * float(np.mean(d.argmin(axis=1) == y))
