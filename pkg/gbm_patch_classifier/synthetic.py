"""
Synthetic PPM patch datasets with class-correlated colour patterns.

Used by the tests and the example script in place of real slide patches.
"""

import os
from typing import Sequence

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES, HistologyClass, Manifest, PatchRecord, encode_ppm
from .file_handler import FileHandler
from .utils import derive_rng


# One base colour per class, RGB
PALETTE = np.array([
    (200, 60, 60),
    (60, 200, 60),
    (60, 60, 200),
    (200, 200, 60),
    (200, 60, 200),
    (60, 200, 200),
], dtype=np.int16)

STRIPE_PERIOD = 4
STRIPE_AMPLITUDE = 40
NOISE_AMPLITUDE = 12


def synthetic_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    '''
    Builds one 3 x size x size uint8 patch for `label`.

    Every class gets its own base colour; even classes carry horizontal stripes, odd classes
    vertical ones. Uniform noise keeps patches of a class distinct from each other.
    '''
    label = int(HistologyClass(label))
    image = np.broadcast_to(PALETTE[label].reshape(3, 1, 1), (3, size, size)).astype(np.int16)
    ramp = (np.arange(size) // STRIPE_PERIOD) % 2 * STRIPE_AMPLITUDE
    stripes = ramp.reshape(size, 1) if label % 2 == 0 else ramp.reshape(1, size)
    image = image + stripes
    image = image + rng.integers(-NOISE_AMPLITUDE, NOISE_AMPLITUDE + 1, size=image.shape)
    return np.clip(image, 0, 255).astype(np.uint8)


def write_synthetic_dataset(
        directory: str,
        counts: Sequence[int] = (10,) * NUM_CLASSES,
        size: int = 32,
        seed: int = 0,
        manifest_name: str = "manifest.csv",
        prefix: str = "patch"
    ) -> str:
    '''
    Writes PPM patches and a manifest CSV (paths relative to `directory`) and returns the
    manifest path. Records are ordered class by class.

    Args:
        directory (str): output directory, created if needed.
        counts (Sequence[int]): patches per class, indexed like `HistologyClass`.
        size (int): patch height and width.
        seed (int): generator seed.
    '''
    if len(counts) != NUM_CLASSES:
        raise ValueError(f"`counts` needs {NUM_CLASSES} entries, got {len(counts)}")
    os.makedirs(directory, exist_ok=True)
    rng = derive_rng(seed, "synthetic")
    records = []
    for label, count in enumerate(counts):
        for i in range(count):
            name = f"{prefix}_{CLASS_NAMES[label]}_{i:03d}.ppm"
            FileHandler(os.path.join(directory, name)).write_bytes(encode_ppm(synthetic_image(label, size, rng)))
            records.append(PatchRecord(name, HistologyClass(label)))

    manifest_path = os.path.join(directory, manifest_name)
    FileHandler(manifest_path).write_to_file(Manifest(records).rows())
    return manifest_path


# Looks for `write_confusable_dataset`: five shared by the majority class and one minority
# class each, then one private look per minority class.
LOOK_PALETTE = np.array([
    (220, 40, 40),
    (40, 220, 40),
    (40, 40, 220),
    (220, 220, 40),
    (220, 40, 220),
    (40, 220, 220),
    (130, 70, 20),
    (20, 130, 70),
    (70, 20, 130),
    (160, 160, 160),
], dtype=np.int16)


def look_image(look: int, size: int) -> np.ndarray:
    '''Noise-free 3 x size x size uint8 patch: a palette colour with stripes, horizontal for even looks.'''
    image = np.broadcast_to(LOOK_PALETTE[look].reshape(3, 1, 1), (3, size, size)).astype(np.int16)
    ramp = (np.arange(size) // STRIPE_PERIOD) % 2 * STRIPE_AMPLITUDE
    image = image + (ramp.reshape(size, 1) if look % 2 == 0 else ramp.reshape(1, size))
    return np.clip(image, 0, 255).astype(np.uint8)


def write_confusable_dataset(
        directory: str,
        majority: int = 60,
        minority: int = 10,
        shared: int = 5,
        size: int = 16,
        manifest_name: str = "manifest.csv",
        prefix: str = "patch"
    ) -> str:
    '''
    Writes an imbalanced dataset in which appearance alone cannot always decide the class and
    returns the manifest path.

    CT gets `majority` patches spread evenly over five shared looks. Every other class gets
    `minority` patches: `shared` of them in the look it shares with CT, the rest in a look of
    its own. Patches of one look are pixel-identical, so the best a classifier can do on a
    shared look is to pick the class with the larger (weighted) count there.
    '''
    minority_classes = NUM_CLASSES - 1
    if majority % minority_classes:
        raise ValueError(f"`majority` must be a multiple of {minority_classes}, got {majority}")
    if not 0 <= shared <= minority:
        raise ValueError(f"`shared` must lie in 0..{minority}, got {shared}")
    os.makedirs(directory, exist_ok=True)

    plan = [(0, look) for look in range(minority_classes) for _ in range(majority // minority_classes)]
    for label in range(1, NUM_CLASSES):
        plan += [(label, label - 1)] * shared
        plan += [(label, minority_classes + label - 1)] * (minority - shared)

    records = []
    for i, (label, look) in enumerate(plan):
        name = f"{prefix}_{CLASS_NAMES[label]}_{i:04d}.ppm"
        FileHandler(os.path.join(directory, name)).write_bytes(encode_ppm(look_image(look, size)))
        records.append(PatchRecord(name, HistologyClass(label)))

    manifest_path = os.path.join(directory, manifest_name)
    FileHandler(manifest_path).write_to_file(Manifest(records).rows())
    return manifest_path
