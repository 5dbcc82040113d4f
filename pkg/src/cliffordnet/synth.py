"""Synthetic datasets written in the exact CIFAR binary layout.

Used by the smoke-training suite and for demo runs when the real archives
are not on disk. Classes are separable but not trivial: each class owns a
base color plus an oriented sinusoidal texture, with per-pixel noise on top.
"""

from __future__ import annotations

import os

import numpy as np

from .data import CLASS_COUNT, RECORD_BYTES
from .errors import ConfigError


def _class_image(label, classes, rng):
    hue = (label % 10) / 10.0
    base = np.array([
        abs(np.cos(2 * np.pi * hue)),
        abs(np.cos(2 * np.pi * (hue + 1.0 / 3.0))),
        abs(np.cos(2 * np.pi * (hue + 2.0 / 3.0))),
    ]) * 140.0 + 40.0
    freq = 1.0 + (label % 5)
    angle = (label % 4) * np.pi / 4.0
    yy, xx = np.mgrid[0:32, 0:32]
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(2.0 * np.pi * freq *
                  (np.cos(angle) * xx + np.sin(angle) * yy) / 32.0 + phase)
    img = base + 45.0 * wave[:, :, None]
    img = img + rng.uniform(-35.0, 35.0, size=(32, 32, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def make_split(n, variant, seed):
    """(images, fine labels) for one synthetic split."""
    classes = CLASS_COUNT[variant]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D]))
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    images = np.stack([_class_image(int(k), classes, rng) for k in labels])
    return images, labels.astype(np.int64)


def write_records(path, images, labels, variant):
    """Serialize (images, labels) in the CIFAR binary record layout."""
    n = len(labels)
    rec = RECORD_BYTES[variant]
    out = np.zeros((n, rec), dtype=np.uint8)
    if variant == "cifar100":
        out[:, 0] = labels % 20  # coarse byte, unused by the loader
        out[:, 1] = labels
    else:
        out[:, 0] = labels
    pixels = images.transpose(0, 3, 1, 2).reshape(n, 3072)
    out[:, rec - 3072:] = pixels
    out.tofile(path)


def generate(data_dir, variant="cifar10", n_train=5000, n_test=1000, seed=0):
    """Write a synthetic train/test pair under data_dir; returns the paths."""
    if variant not in RECORD_BYTES:
        raise ConfigError(f"variant must be cifar10 or cifar100, got {variant!r}")
    os.makedirs(data_dir, exist_ok=True)
    paths = []
    if variant == "cifar10":
        per = -(-n_train // 5)  # five train files, like the real archive
        done = 0
        for i in range(1, 6):
            take = min(per, n_train - done)
            images, labels = make_split(take, variant, seed * 10 + i)
            p = os.path.join(data_dir, f"data_batch_{i}.bin")
            write_records(p, images, labels, variant)
            paths.append(p)
            done += take
        images, labels = make_split(n_test, variant, seed * 10 + 9)
        p = os.path.join(data_dir, "test_batch.bin")
    else:
        images, labels = make_split(n_train, variant, seed * 10 + 1)
        p = os.path.join(data_dir, "train.bin")
        write_records(p, images, labels, variant)
        paths.append(p)
        images, labels = make_split(n_test, variant, seed * 10 + 9)
        p = os.path.join(data_dir, "test.bin")
    write_records(p, images, labels, variant)
    paths.append(p)
    return paths
