"""
Checkpoint persistence and ensemble inference by probability averaging.

#### Checkpoint layout (all integers unsigned 32-bit little-endian):
    magic `GLPC` | version | metadata length | metadata (UTF-8 `key=value` lines)
    | tensor count | per tensor: name length | name | rank | dims... | dtype tag | raw values

Only 32-bit little-endian floats (tag 1) are stored.
"""

import math
import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import model as M
from . import tensor as T
from .data import CLASS_NAMES, HistologyClass, Manifest, NormalizationStats, PatchDataset, normalize, preprocess, to_rgb_unit
from .exceptions import (
    CheckpointError, CheckpointMagicError, CheckpointSchemaError, CheckpointTruncatedError,
    CheckpointVersionError, ConfigError, DataError
)
from .file_handler import FileHandler
from .utils import argmax_lowest, format_float, parse_float_list, slice_iterable


MAGIC = b"GLPC"
FORMAT_VERSION = 1
DTYPE_F32 = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    """
    #### A trained model with everything needed to run it on new patches.

    @attr NormalizationStats `stats`: computed on this model's own training portion.

    @attr int `fold`: cross-validation fold id, -1 for a plain train/validation run.
    """
    architecture: M.ArchitectureConfig
    params: M.ModelParams
    stats: NormalizationStats
    classes: Tuple[str, ...] = CLASS_NAMES
    seed: int = 0
    fold: int = -1
    epochs_run: int = 0
    best_val_loss: float = math.inf
    assume_bgr: bool = False
    version: int = FORMAT_VERSION

    @classmethod
    def from_training(cls, run, architecture: M.ArchitectureConfig, seed: int, fold: int = -1, assume_bgr: bool = False) -> "Checkpoint":
        '''
        Args:
            run (train.SplitRun): a finished training run.
        '''
        return cls(
            architecture=architecture,
            params=run.result.params.astype("float32"),
            stats=run.stats,
            seed=seed,
            fold=fold,
            epochs_run=run.result.epochs_run,
            best_val_loss=run.result.best_val_loss,
            assume_bgr=assume_bgr,
        )

    def metadata(self) -> Dict[str, str]:
        values = {f"arch.{key}": value for key, value in self.architecture.to_dict().items()}
        values.update({
            "norm.mean": ",".join(format_float(v) for v in self.stats.mean),
            "norm.std": ",".join(format_float(v) for v in self.stats.std),
            "classes": ",".join(self.classes),
            "seed": str(self.seed),
            "fold": str(self.fold),
            "epochs_run": str(self.epochs_run),
            "best_val_loss": format_float(self.best_val_loss),
            "preprocess.assume_bgr": "true" if self.assume_bgr else "false",
        })
        return values

    def compatible_with(self, other: "Checkpoint") -> bool:
        return self.architecture == other.architecture and self.classes == other.classes


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(checkpoint.version)]
    metadata = "".join(f"{key}={value}\n" for key, value in sorted(checkpoint.metadata().items()))
    parts.append(_pack_text(metadata))
    parts.append(_U32.pack(len(checkpoint.params)))
    for name, value in checkpoint.params.items():
        parts.append(_pack_text(name))
        parts.append(_U32.pack(value.ndim))
        parts.extend(_U32.pack(dim) for dim in value.shape)
        parts.append(_U32.pack(DTYPE_F32))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    FileHandler(path).write_bytes(encode_checkpoint(checkpoint))


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def text(self, what: str) -> str:
        raw = self.take(self.u32(f"{what} length"), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointSchemaError(f"{what} is not valid UTF-8")


def _parse_metadata(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointSchemaError(f"malformed metadata line `{line}`")
        key, value = line.split("=", 1)
        values[key] = value
    return values


def _checkpoint_fields(metadata: Dict[str, str]) -> Dict:
    try:
        architecture = M.ArchitectureConfig.from_dict(
            {key.removeprefix("arch."): value for key, value in metadata.items() if key.startswith("arch.")}
        )
        return {
            "architecture": architecture,
            "stats": NormalizationStats(parse_float_list(metadata["norm.mean"], 3), parse_float_list(metadata["norm.std"], 3)),
            "classes": tuple(metadata["classes"].split(",")),
            "seed": int(metadata["seed"]),
            "fold": int(metadata["fold"]),
            "epochs_run": int(metadata["epochs_run"]),
            "best_val_loss": float(metadata["best_val_loss"]),
            "assume_bgr": metadata.get("preprocess.assume_bgr", "false") == "true",
        }
    except KeyError as e:
        raise CheckpointSchemaError(f"checkpoint metadata is missing `{e.args[0]}`")
    except (ValueError, ConfigError) as e:
        raise CheckpointSchemaError(f"invalid checkpoint metadata: {e}")


def decode_checkpoint(data: bytes, expected_config: M.ArchitectureConfig | None = None) -> Checkpoint:
    '''
    Parses checkpoint bytes, validating magic, version and the parameter name schema.

    Args:
        expected_config: when given, a checkpoint built for another architecture is rejected.
    '''
    if data[:len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise CheckpointTruncatedError("checkpoint truncated inside the magic bytes")
        raise CheckpointMagicError(f"bad magic {data[:4]!r}: not a GLPC checkpoint")
    reader = _Reader(data)
    reader.pos = len(MAGIC)
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}; this build reads version {FORMAT_VERSION}")

    fields_ = _checkpoint_fields(_parse_metadata(reader.text("metadata")))
    architecture: M.ArchitectureConfig = fields_["architecture"]
    if expected_config is not None and architecture != expected_config:
        raise CheckpointSchemaError(
            f"checkpoint architecture {architecture.to_dict()} does not match the expected {expected_config.to_dict()}"
        )

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("tensor count")):
        name = reader.text("tensor name")
        rank = reader.u32(f"{name} rank")
        if rank > T.MAX_RANK:
            raise CheckpointSchemaError(f"{name}: rank {rank} exceeds {T.MAX_RANK}")
        shape = tuple(reader.u32(f"{name} dims") for _ in range(rank))
        tag = reader.u32(f"{name} dtype tag")
        if tag != DTYPE_F32:
            raise CheckpointSchemaError(f"{name}: unsupported dtype tag {tag}")
        size = int(np.prod(shape, dtype=np.int64)) * 4
        values = np.frombuffer(reader.take(size, f"{name} values"), dtype="<f4").astype(np.float32).reshape(shape)
        if name in tensors:
            raise CheckpointSchemaError(f"duplicate tensor `{name}`")
        tensors[name] = values
    if reader.pos != len(data):
        raise CheckpointSchemaError(f"{len(data) - reader.pos} unexpected trailing bytes")

    shapes = M.parameter_shapes(architecture)
    if set(tensors) != set(shapes):
        missing = sorted(set(shapes) - set(tensors))
        unexpected = sorted(set(tensors) - set(shapes))
        raise CheckpointSchemaError(f"tensor names do not match the architecture (missing {missing[:3]}, unexpected {unexpected[:3]})")
    for name, shape in shapes.items():
        if tensors[name].shape != shape:
            raise CheckpointSchemaError(f"{name}: stored shape {tensors[name].shape}, architecture expects {shape}")
    params = M.ModelParams(architecture, OrderedDict((name, tensors[name]) for name in shapes))
    return Checkpoint(params=params, version=version, **fields_)


def load_checkpoint(path: str, expected_config: M.ArchitectureConfig | None = None) -> Checkpoint:
    try:
        data = FileHandler(path, not_found_ok=False).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        return decode_checkpoint(data, expected_config)
    except CheckpointError as e:
        raise type(e)(f"{path}: {e}")


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict_single(checkpoint: Checkpoint, image_bytes: bytes) -> np.ndarray:
    '''Class probabilities for one encoded patch, preprocessed with the checkpoint's own stats.'''
    image = preprocess(image_bytes, checkpoint.stats, checkpoint.assume_bgr)
    M.check_input(checkpoint.architecture, image[None])
    return M.predict_proba(checkpoint.params, image[None])[0]


def predict_images(checkpoint: Checkpoint, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    '''
    Class probabilities for N x 3 x H x W uint8 patches.
    '''
    M.check_input(checkpoint.architecture, images)
    unit = normalize(to_rgb_unit(images, checkpoint.assume_bgr), checkpoint.stats)
    chunks = [M.predict_proba(checkpoint.params, unit[batch]) for batch in slice_iterable(np.arange(len(unit)), batch_size)]
    return np.concatenate(chunks)


def ensemble_average(probabilities: Sequence[np.ndarray]) -> np.ndarray:
    '''Arithmetic mean of per-model probability arrays, accumulated in 64-bit.'''
    if not probabilities:
        raise ValueError("at least one probability array is required")
    return np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in probabilities]), axis=0)


@dataclass
class EnsemblePrediction:
    path: str
    probabilities: np.ndarray
    label: HistologyClass
    per_model: List[np.ndarray] | None = field(default=None, repr=False)


def check_compatible(checkpoints: Sequence[Checkpoint]) -> None:
    if not checkpoints:
        raise CheckpointError("at least one checkpoint is required")
    first = checkpoints[0]
    for i, other in enumerate(checkpoints[1:], start=1):
        if not first.compatible_with(other):
            raise CheckpointSchemaError(
                f"checkpoint {i} does not share the architecture and class vocabulary of checkpoint 0; "
                "mixed configurations cannot be ensembled"
            )


def predict_ensemble(
        checkpoints: Sequence[Checkpoint],
        dataset: PatchDataset,
        verbose: bool = False,
        batch_size: int = 64,
        workers: int = 1
    ) -> List[EnsemblePrediction]:
    '''
    Averages the softmax vectors of every checkpoint for every record; each checkpoint uses
    its own normalisation stats. Argmax ties go to the lowest class index.

    Args:
        verbose (bool): keep the per-model probability vectors.
        workers (int): checkpoints evaluated concurrently.
    '''
    check_compatible(checkpoints)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            per_model = list(executor.map(lambda c: predict_images(c, dataset.images, batch_size), checkpoints))
    else:
        per_model = [predict_images(c, dataset.images, batch_size) for c in checkpoints]
    mean = ensemble_average(per_model)
    labels = argmax_lowest(mean)
    return [
        EnsemblePrediction(
            path=record.image_path,
            probabilities=mean[i],
            label=HistologyClass(int(labels[i])),
            per_model=[p[i] for p in per_model] if verbose else None,
        )
        for i, record in enumerate(dataset.manifest)
    ]


# ---------------------------------------------------------------------------
# Predictions CSV
# ---------------------------------------------------------------------------

PREDICTION_HEADER = ["path", "pred_label"] + [f"prob_{name}" for name in CLASS_NAMES]


def write_predictions(path: str, predictions: Sequence[EnsemblePrediction], manifest: Manifest) -> None:
    '''One row per manifest record, in manifest order; probabilities with 6 decimals.'''
    if len(predictions) != len(manifest):
        raise DataError(f"{len(predictions)} predictions for {len(manifest)} manifest records")
    rows = [PREDICTION_HEADER]
    for record, prediction in zip(manifest, predictions):
        if record.image_path != prediction.path:
            raise DataError(f"prediction for `{prediction.path}` is out of manifest order")
        rows.append([record.image_path, prediction.label.name] + [f"{p:.6f}" for p in prediction.probabilities])
    FileHandler(path).write_to_file(rows)


@dataclass
class PredictionRow:
    path: str
    label: HistologyClass
    probabilities: Tuple[float, ...]


def read_predictions(path: str) -> List[PredictionRow]:
    try:
        rows = FileHandler(path, not_found_ok=False).read_file()
    except FileNotFoundError:
        raise DataError(f"predictions file not found: {path}")
    if not rows or rows[0] != PREDICTION_HEADER:
        raise DataError(f"{path}: expected header `{','.join(PREDICTION_HEADER)}`")
    predictions = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(PREDICTION_HEADER):
            raise DataError(f"{path}: line {line_no}: expected {len(PREDICTION_HEADER)} fields, got {len(row)}")
        try:
            label = HistologyClass.from_name(row[1])
            probabilities = tuple(float(v) for v in row[2:])
        except ValueError as e:
            raise DataError(f"{path}: line {line_no}: {e}")
        predictions.append(PredictionRow(row[0], label, probabilities))
    return predictions
