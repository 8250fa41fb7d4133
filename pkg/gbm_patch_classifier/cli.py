"""
Command-line interface.

Subcommands: `train`, `cross-validate`, `predict`, `evaluate` and `stats`. Every run writes its
artifacts, the effective configuration and `run.log` into the output directory.

Exit codes: 0 success, 1 usage/config/checkpoint error, 2 data error, 3 training failure.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Mapping, Sequence, Tuple

from . import __version__
from .data import (
    FOLD_SCHEMES, NUM_CLASSES, PatchDataset, class_distribution, compute_norm_stats, kfold_indices, load_manifest,
    stratified_split, write_class_distribution
)
from .ensemble import Checkpoint, check_compatible, load_checkpoint, predict_ensemble, read_predictions, save_checkpoint, write_predictions
from .evaluation import build_report, confusion_from_predictions, summarize_reports, write_summary
from .exceptions import CheckpointError, ConfigError, DataError, ShapeError, TrainingError
from .file_handler import FileHandler
from .logger import Logger
from .model import ArchitectureConfig
from .train import TrainConfig, train_on_split, write_history
from .utils import format_float, get_current_date_time


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_TRAINING = 3
MAX_ENSEMBLE_SIZE = 5
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
TRUE_VALUES = ("true", "1", "yes")
FALSE_VALUES = ("false", "0", "no")


@dataclass
class RunConfig:
    """
    #### Everything a run needs: training settings, architecture and run plumbing.

    Loaded from a flat `key=value` file (`.cfg`, or a flat `.toml`/`.yaml` mapping) and then
    overridden by command-line flags. Unknown keys are rejected.
    """
    # training
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 20
    min_delta: float = 1e-6
    seed: int = 0
    use_class_weights: bool = True
    # architecture
    input_size: int = 512
    base_channels: int = 64
    blocks_per_stage: Tuple[int, ...] = (2, 2, 2, 2)
    include_stem_maxpool: bool = True
    # run
    manifest: str = ""
    image_root: str = ""
    output_dir: str = "output"
    folds: int = 5
    fold_scheme: str = "contiguous"
    split_ratio: float = 0.8
    assume_bgr: bool = False
    deterministic: bool = False
    parallel_folds: bool = False
    workers: int = 4
    log_level: str = "INFO"

    def __post_init__(self):
        self.blocks_per_stage = tuple(self.blocks_per_stage)

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        '''Applies `values` on top of `base` (or the defaults), coercing by field type.'''
        current = asdict(base) if base is not None else asdict(cls())
        unknown = sorted(set(values) - set(current))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for key, raw in values.items():
            current[key] = _coerce(key, raw, current[key])
        return cls(**current)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{name: getattr(self, name) for name in TrainConfig.field_names()})

    def architecture(self) -> ArchitectureConfig:
        return ArchitectureConfig(
            input_size=self.input_size,
            base_channels=self.base_channels,
            blocks_per_stage=self.blocks_per_stage,
            num_classes=NUM_CLASSES,
            include_stem_maxpool=self.include_stem_maxpool,
        )

    def validate(self) -> None:
        self.train_config()
        self.architecture()
        if self.fold_scheme not in FOLD_SCHEMES:
            raise ConfigError(f"fold_scheme must be one of {FOLD_SCHEMES}, got `{self.fold_scheme}`")
        if self.folds < 2:
            raise ConfigError(f"folds must be at least 2, got {self.folds}")
        if not 0 < self.split_ratio < 1:
            raise ConfigError(f"split_ratio must lie strictly between 0 and 1, got {self.split_ratio}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {LOG_LEVELS}, got `{self.log_level}`")
        if not self.output_dir:
            raise ConfigError("output_dir cannot be empty")

    def to_dict(self) -> Dict[str, str]:
        values = {}
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                values[key] = "true" if value else "false"
            elif isinstance(value, float):
                values[key] = format_float(value)
            elif isinstance(value, tuple):
                values[key] = ",".join(str(v) for v in value)
            else:
                values[key] = str(value)
        return values

    def resolved_image_root(self) -> str:
        return self.image_root or os.path.dirname(os.path.abspath(self.manifest))


def _coerce(key: str, raw: Any, default: Any) -> Any:
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            if text.lower() in TRUE_VALUES:
                return True
            if text.lower() in FALSE_VALUES:
                return False
            raise ValueError(f"expected one of {TRUE_VALUES + FALSE_VALUES}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if isinstance(raw, (list, tuple)):
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"invalid value `{raw}` for `{key}`: {e}")
    return text


def load_config_file(path: str) -> Dict[str, Any]:
    '''Reads a flat config mapping from a `.cfg`, `.toml` or `.yaml` file.'''
    try:
        handler = FileHandler(path, not_found_ok=False)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    if handler.filetype not in ("cfg", "toml", "yaml"):
        raise ConfigError(f"unsupported config file type `{handler.filetype}`; use .cfg, .toml or .yaml")
    values = handler.read_file()
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    for key, value in values.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: config must be flat; `{key}` is a table")
    return values


# ---------------------------------------------------------------------------
# Command context
# ---------------------------------------------------------------------------

class CommandContext:
    """
    #### Output directory, logger and provenance shared by every subcommand.

    @param RunConfig `config`: the effective configuration.

    @param bool `quiet`: suppress console output.
    """

    def __init__(self, config: RunConfig, quiet: bool = False) -> None:
        config.validate()
        self.config = config
        self.quiet = quiet
        os.makedirs(config.output_dir, exist_ok=True)
        self.logger = Logger("gbm_patch_classifier", os.path.join(config.output_dir, "run.log"))
        self.logger.set_base_level(config.log_level)
        self.logger.to_console = not quiet
        FileHandler(self.path("effective_config.cfg")).write_to_file(config.to_dict())

    def path(self, name: str) -> str:
        return os.path.join(self.config.output_dir, name)

    def log(self, msg: str, level: str | None = None) -> None:
        return self.logger.log(msg, level or "INFO")

    def echo(self, text: str) -> None:
        if not self.quiet:
            print(text)

    def close(self) -> None:
        self.logger.close()

    def load_dataset(self, require_labels: bool = True) -> PatchDataset:
        if not self.config.manifest:
            raise ConfigError("no manifest given; set `manifest` in the config or pass --manifest")
        manifest = load_manifest(self.config.manifest, require_labels=require_labels)
        self.log(f"LOADING {len(manifest)} PATCHES FROM {self.config.manifest}...")
        return PatchDataset.load(manifest, self.config.resolved_image_root(), self.config.workers)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _report_for(checkpoint: Checkpoint, dataset: PatchDataset, batch_size: int):
    predictions = predict_ensemble([checkpoint], dataset, batch_size=batch_size)
    cm = confusion_from_predictions(dataset.labels, [int(p.label) for p in predictions])
    return predictions, build_report(cm)


def cmd_train(ctx: CommandContext) -> int:
    '''stats -> stratified split -> fit -> checkpoint, history and validation metrics.'''
    config = ctx.config
    dataset = ctx.load_dataset()
    train_idx, val_idx = stratified_split(dataset.manifest, config.split_ratio, config.seed)
    ctx.log(f"SPLIT: {len(train_idx)} TRAINING, {len(val_idx)} VALIDATION PATCHES")
    run = train_on_split(
        dataset, train_idx, val_idx, config.architecture(), config.train_config(),
        assume_bgr=config.assume_bgr, logger=ctx.logger, name="train"
    )
    checkpoint = Checkpoint.from_training(run, config.architecture(), config.seed, assume_bgr=config.assume_bgr)
    save_checkpoint(ctx.path("model.glpc"), checkpoint)
    write_history(ctx.path("history.csv"), run.result.history)
    FileHandler(ctx.path("norm_stats.txt")).write_to_file(run.stats.to_text())

    val_set = dataset.subset(val_idx)
    _, report = _report_for(checkpoint, val_set, config.batch_size)
    report.write_csv(ctx.path("val_metrics.csv"))
    ctx.log(f"TRAINING COMPLETE AFTER {run.result.epochs_run} EPOCHS ({run.result.stop_reason}). CHECKPOINT SAVED TO {ctx.path('model.glpc')}")
    ctx.echo(report.render_table())
    return EXIT_OK


def cmd_cross_validate(ctx: CommandContext) -> int:
    '''One model per stratified fold, per-fold reports and a summary across folds.'''
    config = ctx.config
    dataset = ctx.load_dataset()
    assignment = kfold_indices(dataset.manifest, config.folds, config.fold_scheme, config.seed)

    owner = assignment.fold_of()
    rows = [["index", "path", "label", "fold"]]
    rows.extend(
        [str(i), record.image_path, record.label.name, str(owner[i])]
        for i, record in enumerate(dataset.manifest)
    )
    FileHandler(ctx.path("folds.csv")).write_to_file(rows)

    def run_fold(fold_id: int):
        fold = assignment.folds[fold_id]
        ctx.log(f"STARTING FOLD {fold_id + 1} OF {len(assignment)}...")
        ctx.log(f"FOLD {fold_id} VALIDATES ON INDICES {','.join(str(i) for i in fold.val)}", level="DEBUG")
        run = train_on_split(
            dataset, fold.train, fold.val, config.architecture(), config.train_config(),
            assume_bgr=config.assume_bgr, logger=ctx.logger, name=f"fold{fold_id}"
        )
        checkpoint = Checkpoint.from_training(run, config.architecture(), config.seed, fold=fold_id, assume_bgr=config.assume_bgr)
        save_checkpoint(ctx.path(f"fold{fold_id}.glpc"), checkpoint)
        write_history(ctx.path(f"fold{fold_id}_history.csv"), run.result.history)

        val_set = dataset.subset(fold.val)
        predictions, report = _report_for(checkpoint, val_set, config.batch_size)
        write_predictions(ctx.path(f"fold{fold_id}_predictions.csv"), predictions, val_set.manifest)
        report.write_csv(ctx.path(f"fold{fold_id}_metrics.csv"))
        ctx.log(f"FOLD {fold_id}: ACCURACY {report.accuracy_multiclass:.6f}, MCC {report.mcc_multiclass:.6f}")
        return report

    fold_ids = range(len(assignment))
    if config.parallel_folds and not config.deterministic:
        with ThreadPoolExecutor(max_workers=len(assignment)) as executor:
            reports = list(executor.map(run_fold, fold_ids))
    else:
        reports = [run_fold(fold_id) for fold_id in fold_ids]

    summary = summarize_reports(reports)
    write_summary(ctx.path("cv_summary.csv"), summary)
    ctx.log("CROSS-VALIDATION COMPLETE")
    for metric, scope, mean, low, high in summary:
        if scope in ("micro", "micro_multiclass", "macro", "multiclass"):
            ctx.echo(f"{metric:>14} {scope:>10}: {mean:.6f} [{low:.6f}, {high:.6f}]")
    return EXIT_OK


def cmd_predict(ctx: CommandContext, checkpoint_paths: Sequence[str], output: str | None = None) -> int:
    '''Averages 1 to 5 checkpoints over the manifest and writes the predictions CSV.'''
    if not 1 <= len(checkpoint_paths) <= MAX_ENSEMBLE_SIZE:
        raise ConfigError(f"predict takes between 1 and {MAX_ENSEMBLE_SIZE} checkpoints, got {len(checkpoint_paths)}")
    checkpoints = [load_checkpoint(path) for path in checkpoint_paths]
    check_compatible(checkpoints)
    dataset = ctx.load_dataset(require_labels=False)
    predictions = predict_ensemble(checkpoints, dataset, batch_size=ctx.config.batch_size)
    output = output or ctx.path("predictions.csv")
    write_predictions(output, predictions, dataset.manifest)
    ctx.log(f"WROTE {len(predictions)} PREDICTIONS FROM {len(checkpoints)} MODEL(S) TO {output}")
    return EXIT_OK


def cmd_evaluate(ctx: CommandContext, predictions_path: str) -> int:
    '''Joins predictions to the labeled manifest by path and reports every metric.'''
    if not ctx.config.manifest:
        raise ConfigError("no manifest given; set `manifest` in the config or pass --manifest")
    manifest = load_manifest(ctx.config.manifest)
    labels: Dict[str, int] = {}
    for record in manifest:
        if record.image_path in labels:
            raise DataError(f"duplicate manifest path: {record.image_path}")
        labels[record.image_path] = int(record.label)

    predictions = read_predictions(predictions_path)
    if not predictions:
        raise DataError(f"{predictions_path} holds no predictions")
    true, predicted = [], []
    for prediction in predictions:
        if prediction.path not in labels:
            raise DataError(f"predicted path not in manifest: {prediction.path}")
        true.append(labels[prediction.path])
        predicted.append(int(prediction.label))
    if len(predictions) < len(manifest):
        ctx.log(f"{len(manifest) - len(predictions)} MANIFEST RECORDS HAVE NO PREDICTION", level="WARNING")

    report = build_report(confusion_from_predictions(true, predicted))
    report.write_csv(ctx.path("metrics.csv"))
    ctx.echo(report.render_table())
    return EXIT_OK


def cmd_stats(ctx: CommandContext) -> int:
    '''Normalization stats over every patch of the manifest, plus the class distribution of its labeled records.'''
    dataset = ctx.load_dataset(require_labels=False)
    stats = compute_norm_stats([dataset.unit_images(ctx.config.assume_bgr)])
    FileHandler(ctx.path("norm_stats.txt")).write_to_file(stats.to_text())
    ctx.echo(f"mean: {', '.join(f'{v:.6f}' for v in stats.mean)}")
    ctx.echo(f"std:  {', '.join(f'{v:.6f}' for v in stats.std)}")
    if any(record.label is not None for record in dataset.manifest):
        shares = class_distribution(dataset.manifest)
        write_class_distribution(ctx.path("class_counts.csv"), shares)
        for share in shares:
            ctx.log(f"{share.name}: {share.count} PATCHES ({share.percent:.2f}%)")
    else:
        ctx.log("MANIFEST HAS NO LABELS. SKIPPING CLASS DISTRIBUTION", level="WARNING")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class ArgumentParser(argparse.ArgumentParser):
    '''Raises ConfigError instead of exiting so that usage errors map to exit code 1.'''

    def error(self, message: str):
        raise ConfigError(message)


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file (.cfg, .toml or .yaml)")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--deterministic", action="store_true", default=None, help="serialize all work for bitwise reproducibility")
    common.add_argument("--output-dir", help="directory for every artifact of the run")
    common.add_argument("--manifest", help="manifest CSV with `path,label` rows")
    common.add_argument("--image-root", help="directory image paths are relative to (default: the manifest's)")
    common.add_argument("--log-level", choices=LOG_LEVELS, help="log level")
    common.add_argument("--quiet", action="store_true", help="no console output")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    parser = ArgumentParser(prog="gbm-patch", description="ResNet-18 glioblastoma histology patch classifier")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("train", parents=[common], help="train on a stratified 80/20 split")
    subparsers.add_parser("cross-validate", parents=[common], help="train one model per stratified fold")
    predict = subparsers.add_parser("predict", parents=[common], help="ensemble prediction over a manifest")
    predict.add_argument("--checkpoint", action="append", required=True, help="checkpoint file; repeat for an ensemble")
    predict.add_argument("--predictions", help="output CSV (default: <output-dir>/predictions.csv)")
    evaluate = subparsers.add_parser("evaluate", parents=[common], help="metrics for a predictions CSV")
    evaluate.add_argument("--predictions", required=True, help="predictions CSV to evaluate")
    subparsers.add_parser("stats", parents=[common], help="normalization stats over a manifest")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    '''Config file values first, then `--set` pairs, then the dedicated flags.'''
    config = RunConfig()
    if args.config:
        config = RunConfig.from_mapping(load_config_file(args.config), config)
    overrides: Dict[str, str] = {}
    for pair in args.set:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got `{pair}`")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    flags = {
        "seed": args.seed,
        "deterministic": args.deterministic,
        "output_dir": args.output_dir,
        "manifest": args.manifest,
        "image_root": args.image_root,
        "log_level": args.log_level,
    }
    overrides.update({key: value for key, value in flags.items() if value is not None})
    return RunConfig.from_mapping(overrides, config)


COMMANDS = {
    "train": lambda ctx, args: cmd_train(ctx),
    "cross-validate": lambda ctx, args: cmd_cross_validate(ctx),
    "predict": lambda ctx, args: cmd_predict(ctx, args.checkpoint, args.predictions),
    "evaluate": lambda ctx, args: cmd_evaluate(ctx, args.predictions),
    "stats": lambda ctx, args: cmd_stats(ctx),
}


def exit_code_for(error: Exception) -> int:
    if isinstance(error, (ConfigError, CheckpointError)):
        return EXIT_CONFIG
    if isinstance(error, (DataError, ShapeError)):
        return EXIT_DATA
    if isinstance(error, TrainingError):
        return EXIT_TRAINING
    raise error


def main(argv: Sequence[str] | None = None) -> int:
    ctx = None
    try:
        args = build_parser().parse_args(argv)
        ctx = CommandContext(resolve_config(args), quiet=args.quiet)
        ctx.log(f"{args.command.upper()} STARTED AT {get_current_date_time()} (gbm_patch_classifier {__version__})")
        return COMMANDS[args.command](ctx, args)
    except (ConfigError, CheckpointError, DataError, ShapeError, TrainingError) as e:
        code = exit_code_for(e)
        if ctx is not None:
            ctx.log(f"{type(e).__name__}: {e}", level="ERROR")
        else:
            print(f"error: {e}", file=sys.stderr)
        return code
    finally:
        if ctx is not None:
            ctx.close()


if __name__ == "__main__":
    sys.exit(main())
