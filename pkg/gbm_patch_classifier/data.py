"""
Dataset ingestion and preprocessing for histology patches.

Covers the class vocabulary, manifest parsing, the binary PPM (P6) image codec, the fixed
preprocessing order (decode -> RGB/unit range -> normalize), stratified train/validation
splitting, k-fold assignment and inverse-frequency class weights.
"""

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .exceptions import DataError, ImageDecodeError, ManifestError, StratificationError
from .file_handler import FileHandler
from .utils import derive_rng, format_float


class HistologyClass(IntEnum):
    CT = 0  # cellular tumor
    PN = 1  # pseudopalisading necrosis
    MP = 2  # microvascular proliferation
    NC = 3  # geographic necrosis
    IC = 4  # infiltration into the cortex
    WM = 5  # penetration into white matter

    @classmethod
    def from_name(cls, name: str) -> "HistologyClass":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown label `{name}`; expected one of {', '.join(CLASS_NAMES)}")


CLASS_NAMES: Tuple[str, ...] = tuple(c.name for c in HistologyClass)
NUM_CLASSES = len(CLASS_NAMES)


@dataclass(frozen=True)
class PatchRecord:
    image_path: str
    label: HistologyClass | None = None

    def __post_init__(self):
        if not self.image_path:
            raise ValueError("`image_path` cannot be empty")
        if self.label is not None:
            object.__setattr__(self, "label", HistologyClass(self.label))


@dataclass
class Manifest:
    """
    #### Ordered list of patch records.

    @attr `counts`: per-class record counts, indexed by `HistologyClass` value.
    """
    records: List[PatchRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> PatchRecord:
        return self.records[index]

    def __iter__(self):
        return iter(self.records)

    @property
    def has_labels(self) -> bool:
        return all(record.label is not None for record in self.records)

    @property
    def paths(self) -> List[str]:
        return [record.image_path for record in self.records]

    @property
    def labels(self) -> np.ndarray:
        if not self.has_labels:
            raise DataError("manifest has unlabeled records")
        return np.array([int(record.label) for record in self.records], dtype=np.int64)

    @property
    def counts(self) -> np.ndarray:
        labels = [int(r.label) for r in self.records if r.label is not None]
        return np.bincount(np.asarray(labels, dtype=np.int64), minlength=NUM_CLASSES)

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == int(label))

    def subset(self, indices: Sequence[int]) -> "Manifest":
        return Manifest([self.records[i] for i in indices])

    def rows(self) -> List[List[str]]:
        '''Header plus one `[path, label]` row per record.'''
        return [["path", "label"]] + [
            [record.image_path, record.label.name if record.label is not None else ""]
            for record in self.records
        ]

    def to_text(self) -> str:
        buffer = io.StringIO()
        csv.writer(buffer, lineterminator="\n").writerows(self.rows())
        return buffer.getvalue()


def parse_manifest(text: str, require_labels: bool = True) -> Manifest:
    '''
    Parses a manifest CSV with header `path,label`.

    Args:
        text (str): CSV content.
        require_labels (bool): when False, a `path`-only header and empty labels are accepted.

    Raises ManifestError naming the offending line.
    '''
    rows = list(csv.reader(io.StringIO(text.lstrip("﻿"))))
    if not rows:
        raise ManifestError("manifest is empty", line=1)
    header = [cell.strip().lower() for cell in rows[0]]
    if header != ["path", "label"] and (require_labels or header != ["path"]):
        raise ManifestError(f"expected header `path,label`, got `{','.join(rows[0])}`", line=1)

    records: List[PatchRecord] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ManifestError(f"expected {len(header)} fields, got {len(row)}", line=line_no)
        path = row[0].strip()
        if not path:
            raise ManifestError("empty path", line=line_no)
        raw_label = row[1].strip() if len(row) > 1 else ""
        if not raw_label:
            if require_labels:
                raise ManifestError("missing label", line=line_no)
            records.append(PatchRecord(path))
            continue
        try:
            label = HistologyClass.from_name(raw_label)
        except ValueError as e:
            raise ManifestError(str(e), line=line_no)
        records.append(PatchRecord(path, label))
    return Manifest(records)


def load_manifest(path: str, require_labels: bool = True) -> Manifest:
    '''Reads and parses a manifest file.'''
    try:
        content = FileHandler(path, not_found_ok=False, allow_any=True).read_bytes()
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}")
    try:
        text = content.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ManifestError(f"manifest is not valid UTF-8: {e}")
    return parse_manifest(text, require_labels=require_labels)


# ---------------------------------------------------------------------------
# PPM codec
# ---------------------------------------------------------------------------

PPM_MAGIC = b"P6"
PPM_MAXVAL = 255
_WHITESPACE = b" \t\n\r\x0b\x0c"


def _read_header_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    while pos < len(data):
        if data[pos:pos + 1] in (b"#",):
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos] in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageDecodeError("truncated PPM header")
    return data[start:pos], pos


def decode_image(data: bytes) -> np.ndarray:
    '''
    Decodes a binary PPM (P6, maxval 255) into a 3 x H x W uint8 tensor, channels in stored order.
    '''
    if not data.startswith(PPM_MAGIC):
        raise ImageDecodeError(f"bad magic {data[:2]!r}: expected binary PPM `P6`")
    pos = len(PPM_MAGIC)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ImageDecodeError(f"bad magic {data[:3]!r}: expected binary PPM `P6`")
    fields = []
    for name in ("width", "height", "maxval"):
        token, pos = _read_header_token(data, pos)
        if not token.isdigit():
            raise ImageDecodeError(f"invalid PPM {name} `{token.decode('latin-1')}`")
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageDecodeError(f"invalid PPM size {width}x{height}")
    if maxval != PPM_MAXVAL:
        raise ImageDecodeError(f"unsupported PPM maxval {maxval}; only {PPM_MAXVAL} is accepted")
    if pos >= len(data):
        raise ImageDecodeError("truncated PPM: no pixel data")
    pos += 1  # single whitespace byte ends the header
    expected = width * height * 3
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise ImageDecodeError(f"truncated PPM pixel data: expected {expected} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def encode_ppm(image: np.ndarray) -> bytes:
    '''Encodes a 3 x H x W uint8 tensor as binary PPM.'''
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got shape {image.shape}")
    pixels = np.asarray(image, dtype=np.uint8).transpose(1, 2, 0)
    header = b"P6\n%d %d\n%d\n" % (image.shape[2], image.shape[1], PPM_MAXVAL)
    return header + pixels.tobytes()


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def to_rgb_unit(input: np.ndarray, assume_bgr: bool = False, precision: T.Precision = "float32") -> np.ndarray:
    '''
    Swaps channels 0 and 2 when `assume_bgr` is set and scales 8-bit values into [0, 1].
    Works on a single 3 x H x W image or an N x 3 x H x W batch.
    '''
    if input.ndim not in (3, 4) or input.shape[-3] != 3:
        raise ValueError(f"expected 3 channels on axis -3, got shape {input.shape}")
    pixels = np.flip(input, axis=-3) if assume_bgr else input
    return np.ascontiguousarray(pixels, dtype=T.dtype_for(precision)) / T.dtype_for(precision).type(255)


@dataclass(frozen=True)
class NormalizationStats:
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("normalization stats need three means and three stds")
        if min(self.std) <= 0:
            raise ValueError("normalization std must be positive for every channel")

    def to_text(self) -> str:
        '''Six lines: three means then three stds.'''
        return "".join(f"{format_float(v)}\n" for v in (*self.mean, *self.std))

    @classmethod
    def from_text(cls, text: str) -> "NormalizationStats":
        values = [float(line) for line in text.split() if line.strip()]
        if len(values) != 6:
            raise DataError(f"normalization stats file needs 6 numbers, got {len(values)}")
        return cls(tuple(values[:3]), tuple(values[3:]))


def compute_norm_stats(images: Iterable[np.ndarray]) -> NormalizationStats:
    '''
    Per-channel mean and population std over every pixel of unit-range images.

    Args:
        images: 3 x H x W images or N x 3 x H x W batches, visited in the given order.
    '''
    images = [np.asarray(image) for image in images]
    if not images:
        raise DataError("at least one image is required to compute normalization stats")
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for image in images:
        if image.shape[-3] != 3:
            raise DataError(f"expected 3 channels, got shape {image.shape}")
        axes = tuple(i for i in range(image.ndim) if i != image.ndim - 3)
        total += image.sum(axis=axes, dtype=np.float64)
        count += image.size // 3
    mean = total / count
    squares = np.zeros(3, dtype=np.float64)
    for image in images:
        axes = tuple(i for i in range(image.ndim) if i != image.ndim - 3)
        centered = image.astype(np.float64) - mean.reshape(3, 1, 1)
        squares += (centered ** 2).sum(axis=axes)
    std = np.sqrt(squares / count)
    for channel, value in enumerate(std):
        if value == 0:
            raise DataError(f"channel {channel} is constant (std 0); cannot normalize")
    return NormalizationStats(tuple(mean), tuple(std))


def _channel_stats(stats: NormalizationStats, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = np.asarray(stats.mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=np.float64).reshape(3, 1, 1)
    return mean, std


def normalize(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    '''(x - mean_c) / std_c on the channel axis (-3); dtype preserved.'''
    mean, std = _channel_stats(stats, x)
    return ((x.astype(np.float64) - mean) / std).astype(x.dtype)


def denormalize(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    '''Inverse of `normalize`.'''
    mean, std = _channel_stats(stats, x)
    return (x.astype(np.float64) * std + mean).astype(x.dtype)


def preprocess(
        image_bytes: bytes,
        stats: NormalizationStats,
        assume_bgr: bool = False,
        precision: T.Precision = "float32"
    ) -> np.ndarray:
    '''decode -> RGB/unit range -> normalize, in that fixed order.'''
    return normalize(to_rgb_unit(decode_image(image_bytes), assume_bgr, precision), stats)


# ---------------------------------------------------------------------------
# Image loading
# ---------------------------------------------------------------------------

def resolve_path(image_path: str, image_root: str | None) -> str:
    if os.path.isabs(image_path) or not image_root:
        return image_path
    return os.path.join(image_root, image_path)


def read_image_bytes(image_path: str, image_root: str | None = None) -> bytes:
    path = resolve_path(image_path, image_root)
    try:
        return FileHandler(path, not_found_ok=False, allow_any=True).read_bytes()
    except FileNotFoundError:
        raise DataError(f"image not found: {image_path}")


class PatchDataset:
    """
    #### A manifest together with its decoded 8-bit images.

    @param Manifest `manifest`: the records, in order.
    @param np.ndarray `images`: N x 3 x H x W uint8 pixels in stored channel order.
    """

    def __init__(self, manifest: Manifest, images: np.ndarray) -> None:
        if images.ndim != 4 or images.shape[0] != len(manifest) or images.shape[1] != 3:
            raise DataError(f"images of shape {images.shape} do not match {len(manifest)} records")
        self.manifest = manifest
        self.images = images

    def __len__(self) -> int:
        return len(self.manifest)

    @classmethod
    def load(cls, manifest: Manifest, image_root: str | None = None, workers: int = 4) -> "PatchDataset":
        '''
        Decodes every image of `manifest`. Files are read concurrently; order follows the manifest.
        '''
        if len(manifest) == 0:
            raise DataError("manifest has no records")

        def load_one(record: PatchRecord) -> np.ndarray:
            try:
                return decode_image(read_image_bytes(record.image_path, image_root))
            except ImageDecodeError as e:
                raise ImageDecodeError(f"{record.image_path}: {e}")

        with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            images = list(executor.map(load_one, manifest.records))
        shapes = {image.shape for image in images}
        if len(shapes) != 1:
            raise DataError(f"images have differing sizes: {sorted(shapes)}")
        return cls(manifest, np.stack(images))

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, indices: Sequence[int]) -> "PatchDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return PatchDataset(self.manifest.subset(indices.tolist()), self.images[indices])

    def unit_images(self, assume_bgr: bool = False, precision: T.Precision = "float32") -> np.ndarray:
        return to_rgb_unit(self.images, assume_bgr, precision)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _train_count(n_k: int, ratio: float) -> int:
    # rounding guards against 0.8 * n landing a hair below an integer
    n_train = max(1, math.floor(round(ratio * n_k, 9)))
    return min(n_train, n_k - 1)


def stratified_split(manifest: Manifest, ratio: float = 0.8, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Per class, floor(ratio * n_k) records (at least 1, at most n_k - 1) go to training after a
    seeded shuffle within the class; the rest validate.

    Returns sorted `(train_indices, val_indices)`.
    '''
    if not 0 < ratio < 1:
        raise ValueError("`ratio` must lie strictly between 0 and 1")
    counts = manifest.counts
    for label, n_k in enumerate(counts):
        if n_k < 2:
            raise StratificationError(f"class {CLASS_NAMES[label]} has {n_k} record(s); at least 2 are needed to stratify")

    train: List[int] = []
    val: List[int] = []
    for label in range(NUM_CLASSES):
        indices = derive_rng(seed, "split", label).permutation(manifest.class_indices(label))
        n_train = _train_count(len(indices), ratio)
        train.extend(indices[:n_train].tolist())
        val.extend(indices[n_train:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64)


@dataclass
class Fold:
    train: np.ndarray
    val: np.ndarray


@dataclass
class FoldAssignment:
    fold_count: int
    folds: List[Fold]
    total: int

    def __iter__(self):
        return iter(self.folds)

    def __len__(self) -> int:
        return len(self.folds)

    def fold_of(self) -> np.ndarray:
        '''For every manifest index, the fold that validates it.'''
        owner = np.full(self.total, -1, dtype=np.int64)
        for fold_id, fold in enumerate(self.folds):
            owner[fold.val] = fold_id
        return owner


FOLD_SCHEMES = ("seeded", "contiguous")


def kfold_indices(manifest: Manifest, k: int = 5, scheme: str = "seeded", seed: int = 0) -> FoldAssignment:
    '''
    Stratified k-fold assignment.

    Each class's indices (shuffled when `scheme` is "seeded", in manifest order when
    "contiguous") are cut into k near-equal runs; fold i validates on run i of every class.
    '''
    if scheme not in FOLD_SCHEMES:
        raise ValueError(f"unknown fold scheme `{scheme}`; expected one of {FOLD_SCHEMES}")
    if k < 2:
        raise ValueError("`k` must be at least 2")
    counts = manifest.counts
    for label, n_k in enumerate(counts):
        if n_k < k:
            raise StratificationError(f"class {CLASS_NAMES[label]} has {n_k} record(s); {k} folds need at least {k}")

    runs: List[List[int]] = [[] for _ in range(k)]
    for label in range(NUM_CLASSES):
        indices = manifest.class_indices(label)
        if scheme == "seeded":
            indices = derive_rng(seed, "folds", label).permutation(indices)
        for fold_id, run in enumerate(np.array_split(indices, k)):
            runs[fold_id].extend(run.tolist())

    everything = np.arange(len(manifest))
    folds = []
    for run in runs:
        val = np.array(sorted(run), dtype=np.int64)
        folds.append(Fold(train=np.setdiff1d(everything, val), val=val))
    return FoldAssignment(fold_count=k, folds=folds, total=len(manifest))


def class_weights(counts: Sequence[int]) -> np.ndarray:
    '''
    Inverse-frequency weights w_k = N / (K * n_k); balanced counts give 1.0 for every class.
    '''
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError("`counts` must list at least two class counts")
    if np.any(counts <= 0):
        empty = [CLASS_NAMES[i] if counts.size == NUM_CLASSES else str(i) for i in np.flatnonzero(counts <= 0)]
        raise DataError(f"class weights are undefined for classes without samples: {', '.join(empty)}")
    return counts.sum() / (counts.size * counts)


@dataclass(frozen=True)
class ClassShare:
    name: str
    count: int
    percent: float


def class_distribution(manifest: Manifest) -> List[ClassShare]:
    '''
    Count and percentage of labeled records per class, in `HistologyClass` order.

    Unlabeled records are ignored. Raises DataError when no record carries a label.
    '''
    counts = manifest.counts
    total = int(counts.sum())
    if total == 0:
        raise DataError("manifest has no labeled records")
    return [ClassShare(name, int(count), 100.0 * int(count) / total) for name, count in zip(CLASS_NAMES, counts)]


def write_class_distribution(path: str, shares: Sequence[ClassShare]) -> None:
    '''CSV `class,count,percent`.'''
    rows = [["class", "count", "percent"]]
    rows.extend([share.name, str(share.count), format_float(share.percent)] for share in shares)
    FileHandler(path).write_to_file(rows)
