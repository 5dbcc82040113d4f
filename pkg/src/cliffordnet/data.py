"""CIFAR binary ingestion, normalization, augmentation, batch iteration.

The loader reads the published binary layout exactly: one record per image,
label byte(s) followed by 3072 pixel bytes stored channel-major (1024 R,
1024 G, 1024 B), row-major within each channel. Images are converted to the
engine's channel-last uint8 layout on load.

Nothing here touches the network; see scripts/fetch_cifar.py for a download
helper and cliffordnet.synth for a format-identical synthetic generator.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor

RECORD_BYTES = {"cifar10": 3073, "cifar100": 3074}
CLASS_COUNT = {"cifar10": 10, "cifar100": 100}

# per-channel statistics of the training sets, in [0, 1] units
NORM_STATS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}

_SPLIT_FILES = {
    ("cifar10", "train"): ["data_batch_%d.bin" % i for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}

_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}


@dataclass
class Dataset:
    images: np.ndarray  # (N, 32, 32, 3) uint8
    labels: np.ndarray  # (N,) int64
    class_count: int
    split: str = ""

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        """First n samples; handy for smoke-scale runs."""
        return Dataset(self.images[:n], self.labels[:n],
                       self.class_count, self.split)


def load_cifar(path, variant):
    """Load one binary batch file."""
    if variant not in RECORD_BYTES:
        raise ConfigError(f"variant must be cifar10 or cifar100, got {variant!r}")
    rec = RECORD_BYTES[variant]
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % rec:
        expected = (raw.size // rec + 1) * rec if raw.size else rec
        raise DataError(
            f"{path}: corrupt {variant} file, {raw.size} bytes is not a "
            f"multiple of the {rec}-byte record (next valid size {expected})"
        )
    n = raw.size // rec
    records = raw.reshape(n, rec)
    # cifar100 stores a coarse label byte first; the fine label is used
    labels = records[:, rec - 3073].astype(np.int64)
    pixels = records[:, rec - 3072:]
    images = pixels.reshape(n, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(np.ascontiguousarray(images), labels,
                   CLASS_COUNT[variant], os.path.basename(str(path)))


def load_cifar_dir(data_dir, variant, split):
    """Load a standard split, accepting flat or tarball directory layouts."""
    names = _SPLIT_FILES[(variant, split)]
    for base in (data_dir, os.path.join(data_dir, _SUBDIRS[variant])):
        paths = [os.path.join(base, n) for n in names]
        if all(os.path.exists(p) for p in paths):
            parts = [load_cifar(p, variant) for p in paths]
            return Dataset(
                np.concatenate([d.images for d in parts]),
                np.concatenate([d.labels for d in parts]),
                CLASS_COUNT[variant], split)
    raise DataError(
        f"no {variant} {split} files under {data_dir!r} "
        f"(looked for {', '.join(names)})"
    )


def normalize(images, variant="cifar100"):
    """Bytes -> float tensor: per channel (x/255 - mean) / std."""
    mean, std = NORM_STATS[variant]
    x = images.astype(np.float32) / 255.0
    x -= np.asarray(mean, dtype=np.float32)
    x /= np.asarray(std, dtype=np.float32)
    return Tensor(x)


@dataclass
class AugmentConfig:
    pad_crop: int = 4
    hflip_prob: float = 0.5
    erase_prob: float = 0.25
    erase_area_frac: tuple = (0.02, 0.33)
    seed: int = 0

    def __post_init__(self):
        for p in (self.hflip_prob, self.erase_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability {p} outside [0, 1]")
        lo, hi = self.erase_area_frac
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError(f"erase area range {self.erase_area_frac} invalid")


def augment(image, config, rng):
    """Pad-crop, horizontal flip, random erasing on one uint8 image."""
    h, w, _ = image.shape
    p = config.pad_crop
    if p > 0:
        padded = np.pad(image, ((p, p), (p, p), (0, 0)), mode="reflect")
        oy, ox = rng.integers(0, 2 * p + 1, size=2)
        image = padded[oy:oy + h, ox:ox + w]
    if rng.random() < config.hflip_prob:
        image = image[:, ::-1]
    image = np.ascontiguousarray(image)
    if rng.random() < config.erase_prob:
        lo, hi = config.erase_area_frac
        area = rng.uniform(lo, hi) * h * w
        # conventional aspect range for random erasing
        ratio = np.exp(rng.uniform(np.log(0.3), np.log(1.0 / 0.3)))
        eh = min(h, max(1, int(round(np.sqrt(area * ratio)))))
        ew = min(w, max(1, int(round(np.sqrt(area / ratio)))))
        ey = int(rng.integers(0, h - eh + 1))
        ex = int(rng.integers(0, w - ew + 1))
        image[ey:ey + eh, ex:ex + ew] = rng.integers(
            0, 256, size=(eh, ew, 3), dtype=np.uint8)
    return image


def batches(dataset, batch_size, shuffle_seed, epoch, augment_config=None):
    """Epoch-seeded permutation; every sample exactly once, last batch kept.

    Yields (normalized image Tensor, int label array). Augmentation runs
    only when a config is supplied, on its own epoch-seeded stream.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng(
        np.random.SeedSequence([int(shuffle_seed), int(epoch)])).permutation(n)
    aug_rng = None
    if augment_config is not None:
        aug_rng = np.random.default_rng(np.random.SeedSequence(
            [int(shuffle_seed), int(epoch), int(augment_config.seed), 1]))
    variant = "cifar10" if dataset.class_count == 10 else "cifar100"
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        imgs = dataset.images[idx]
        if aug_rng is not None:
            imgs = np.stack([augment(im, augment_config, aug_rng)
                             for im in imgs])
        yield normalize(imgs, variant), dataset.labels[idx]
