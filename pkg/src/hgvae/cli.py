"""Command-line entry point.

Exit codes:

====  ==================================================
0     success
1     unexpected error
2     usage error (unknown flag, conflicting flags)
3     missing or unreadable input file
4     invalid configuration or argument value
5     malformed dataset or checkpoint, or a shape mismatch between them
6     non-finite loss or score
7     class conditioning error
====  ==================================================
"""

import argparse
import logging
import platform
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pydantic
from pydantic import Field, ValidationError

from . import __version__
from .base import BaseHGVAEObject
from .checkpoint import build_model, load_checkpoint, save_checkpoint
from .config import (
    BaselineConfig,
    ImputeConfig,
    ModelConfig,
    TrainConfig,
    format_latent_shapes,
    load_key_value_file,
    resolve_seed,
)
from .data import MotionDataset, SkeletonSpec, load_dataset, synthesize_motions, unflatten_nodes, write_dataset
from .enums import Command, ImputeMethod, ModelKind, PosteriorObjective
from .errors import (
    CheckpointError,
    ConditioningError,
    ConfigFileError,
    DatasetFormatError,
    NonFiniteError,
)
from .imputer import default_impute_config, occlusion_results
from .metrics import plot_report, read_results, summarize_results, write_report
from .model import HGVAE, MotionModel
from .trainer import train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4
EXIT_FORMAT = 5
EXIT_NON_FINITE = 6
EXIT_CONDITIONING = 7

DEFAULT_OCCLUSION_GRID = "0,13,27,135,270,1350"


class RunManifest(BaseHGVAEObject):
    """Everything needed to rerun a command, written next to its main output."""

    command: Command
    argv: list[str]
    seed: int
    config: dict[str, Any] = Field(default_factory=dict)
    versions: dict[str, str] = Field(default_factory=dict)


def _versions() -> dict[str, str]:
    return {
        "hgvae": __version__,
        "numpy": np.__version__,
        "pydantic": pydantic.VERSION,
        "python": platform.python_version(),
    }


def write_manifest(
    output: str | Path, command: Command, argv: Sequence[str], seed: int, **config: Any
) -> Path:
    path = Path(f"{output}.manifest.json")
    manifest = RunManifest(command=command, argv=list(argv), seed=seed, config=config, versions=_versions())
    path.write_text(manifest.to_json() + "\n")
    return path


def _model_config_dict(model: MotionModel) -> dict[str, Any]:
    return model.config.model_dump(mode="json")


def _check_compatible(dataset: MotionDataset, model: MotionModel) -> None:
    cfg = model.config
    if dataset.joints * 3 != cfg.n_nodes or dataset.frames != cfg.n_obs_features:
        raise DatasetFormatError(
            f"dataset has {dataset.joints} joints x {dataset.frames} frames, the model expects "
            f"{cfg.n_nodes // 3} joints x {cfg.n_obs_features} frames"
        )


def _labels(dataset: MotionDataset, model: MotionModel) -> np.ndarray | None:
    if not model.conditional:
        return None
    if dataset.labels is None:
        raise ConditioningError("the model is class-conditioned but the dataset has no labels")
    return dataset.labels


def _occlusion_count(args: argparse.Namespace, model: MotionModel) -> int:
    cells = model.config.n_nodes * model.config.n_obs_features
    if args.occlusion_fraction is not None:
        if not 0.0 <= args.occlusion_fraction <= 1.0:
            raise ValueError(f"occlusion fraction must lie in [0, 1], got {args.occlusion_fraction}")
        return int(round(args.occlusion_fraction * cells))
    return int(args.occlusions)


def _impute_config(args: argparse.Namespace, model: MotionModel) -> ImputeConfig:
    base = default_impute_config(model)
    return base.updated(
        max_steps=getattr(args, "steps", None),
        learning_rate=getattr(args, "lr", None),
        objective=args.objective,
        batch_size=args.batch_size,
        progress=args.progress or None,
    )


def cmd_synth(args: argparse.Namespace, argv: Sequence[str]) -> int:
    seed = resolve_seed(args.seed)
    spec = SkeletonSpec.load(args.skeleton) if args.skeleton else SkeletonSpec.default()
    dataset = synthesize_motions(spec, args.count, args.classes, seed, args.frames, noise=args.noise)
    write_dataset(dataset, args.out)
    write_manifest(
        args.out, Command.SYNTH, argv, seed, count=args.count, classes=args.classes, frames=args.frames,
        noise=args.noise, skeleton=spec.model_dump(),
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    dataset = load_dataset(args.data)
    train_values, model_values = load_key_value_file(args.config) if args.config else ({}, {})
    seed = resolve_seed(args.seed, int(train_values.get("seed", 0)))
    kind = ModelKind(args.model)
    model_config: ModelConfig | BaselineConfig
    if kind is ModelKind.VAE_BASELINE:
        if args.conditional:
            raise ConditioningError("the baseline VAE does not support class conditioning")
        baseline = BaselineConfig(n_nodes=dataset.joints * 3, n_obs_features=dataset.frames)
        if args.preset == "desk":
            baseline = baseline.scaled(0.1)
        model_config = baseline.updated(seed=seed).updated(**model_values)
        train_config = TrainConfig.for_baseline()
    else:
        preset = ModelConfig.desk if args.preset == "desk" else ModelConfig.full
        classes = None
        if args.conditional:
            if dataset.labels is None:
                raise ConditioningError("--conditional needs a labelled dataset")
            classes = dataset.class_count
        model_config = preset(
            n_nodes=dataset.joints * 3, n_obs_features=dataset.frames, condition_classes=classes, seed=seed
        ).updated(**model_values)
        train_config = TrainConfig.desk() if args.preset == "desk" else TrainConfig()
    train_config = train_config.updated(**train_values).updated(
        seed=seed,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        checkpoint_every=args.checkpoint_every,
        progress=args.progress or None,
    )
    model = build_model(model_config)
    _check_compatible(dataset, model)
    logger.info("Training %r", model)
    _, log = train(dataset, model, train_config, args.out_checkpoint)
    save_checkpoint(model, args.out_checkpoint)
    log.to_csv(args.log or f"{args.out_checkpoint}.log.csv")
    write_manifest(
        args.out_checkpoint, Command.TRAIN, argv, seed,
        model=_model_config_dict(model), train=train_config.model_dump(mode="json"),
    )
    return EXIT_OK


def cmd_generate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    seed = resolve_seed(args.seed)
    model = load_checkpoint(args.checkpoint)
    trajectories = model.generate(args.count, args.temperature, args.class_id, np.random.default_rng(seed))
    labels = None if args.class_id is None else np.full(args.count, args.class_id)
    dataset = MotionDataset(
        positions=unflatten_nodes(trajectories), labels=labels, provenance=f"generated:{Path(args.checkpoint).name}"
    )
    write_dataset(dataset, args.out)
    write_manifest(
        args.out, Command.GENERATE, argv, seed, checkpoint=str(args.checkpoint), count=args.count,
        temperature=args.temperature, class_id=args.class_id,
    )
    return EXIT_OK


def cmd_impute(args: argparse.Namespace, argv: Sequence[str]) -> int:
    seed = resolve_seed(args.seed)
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    _check_compatible(dataset, model)
    cfg = _impute_config(args, model)
    count = _occlusion_count(args, model)
    results = occlusion_results(
        dataset.trajectories(), model, [count], seed, cfg, _labels(dataset, model),
        methods=(ImputeMethod.MEAN, ImputeMethod.MAP),
    )
    results.to_csv(args.out_csv, index=False)
    write_manifest(args.out_csv, Command.IMPUTE, argv, seed, count=count, impute=cfg.model_dump(mode="json"))
    return EXIT_OK


def cmd_score(args: argparse.Namespace, argv: Sequence[str]) -> int:
    seed = resolve_seed(args.seed)
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    _check_compatible(dataset, model)
    cfg = _impute_config(args, model)
    cells = model.config.n_nodes * model.config.n_obs_features
    if args.occlusion_fractions:
        counts = [int(round(float(f) * cells)) for f in args.occlusion_fractions.split(",")]
    else:
        counts = [int(c) for c in args.occlusion_grid.split(",")]
    methods = (ImputeMethod.MEAN, ImputeMethod.MAP) if args.map else (ImputeMethod.MEAN,)
    results = occlusion_results(dataset.trajectories(), model, counts, seed, cfg, _labels(dataset, model), methods)
    results.to_csv(args.out_csv, index=False)
    write_manifest(args.out_csv, Command.SCORE, argv, seed, counts=counts, impute=cfg.model_dump(mode="json"))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    summary = summarize_results(read_results(args.pred_csv))
    report = args.out_report or Path(args.out_svg).with_suffix(".csv")
    write_report(summary, report)
    plot_report(summary, args.out_svg)
    write_manifest(args.out_svg, Command.EVAL, argv, 0, results=str(args.pred_csv), report=str(report))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace, argv: Sequence[str]) -> int:
    model = load_checkpoint(args.checkpoint)
    print(model.config.to_json())
    if isinstance(model, HGVAE):
        shapes = ", ".join(f"({s})" for s in format_latent_shapes(model.config.latent_shapes).split(","))
        print(f"latent shapes: {shapes}")
    else:
        print(f"hidden widths: {model.config.hidden_widths}, latent size: {model.config.latent_size}")
    print(f"parameters: {model.parameter_count()}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    parser.add_argument("--progress", action="store_true", help="show progress bars")


def _add_scoring(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True, type=Path)
    parser.add_argument("--data", required=True, type=Path)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-csv", required=True, type=Path)
    parser.add_argument("--objective", choices=[o.value for o in PosteriorObjective])
    parser.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgvae", description="Hierarchical graph-convolutional VAE for motion data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser(Command.SYNTH.value, help="synthesise a labelled motion dataset")
    synth.add_argument("--out", required=True, type=Path)
    synth.add_argument("--count", type=int, default=512)
    synth.add_argument("--classes", type=int, default=1)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--frames", type=int, default=50)
    synth.add_argument("--noise", type=float, default=0.01)
    synth.add_argument("--skeleton", type=Path, help="skeleton definition file")

    trainp = sub.add_parser(Command.TRAIN.value, help="train a model on an HGMD dataset")
    trainp.add_argument("--data", required=True, type=Path)
    trainp.add_argument("--config", type=Path, help="key=value file; model.* keys configure the model")
    trainp.add_argument("--out-checkpoint", required=True, type=Path)
    trainp.add_argument("--log", type=Path, help="TrainLog CSV (default: <checkpoint>.log.csv)")
    trainp.add_argument("--model", choices=[k.value for k in ModelKind], default=ModelKind.HGVAE.value)
    trainp.add_argument("--preset", choices=["full", "desk"], default="full")
    trainp.add_argument("--conditional", action="store_true", help="condition the decoder on class labels")
    trainp.add_argument("--epochs", type=int)
    trainp.add_argument("--batch-size", type=int)
    trainp.add_argument("--lr", type=float)
    trainp.add_argument("--checkpoint-every", type=int)
    trainp.add_argument("--seed", type=int)

    gen = sub.add_parser(Command.GENERATE.value, help="sample motions from a trained model")
    gen.add_argument("--checkpoint", required=True, type=Path)
    gen.add_argument("--count", type=int, default=1)
    gen.add_argument("--temperature", type=float, default=1.0)
    gen.add_argument("--class", dest="class_id", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", required=True, type=Path)

    imp = sub.add_parser(Command.IMPUTE.value, help="occlude, mean-impute and MAP-impute a dataset")
    _add_scoring(imp)
    amount = imp.add_mutually_exclusive_group(required=True)
    amount.add_argument("--occlusions", type=int, help="occluded cells per sequence")
    amount.add_argument("--occlusion-fraction", type=float, help="fraction of cells occluded per sequence")
    imp.add_argument("--steps", type=int)
    imp.add_argument("--lr", type=float)

    score = sub.add_parser(Command.SCORE.value, help="anomaly scores over a grid of occlusion levels")
    _add_scoring(score)
    grid = score.add_mutually_exclusive_group()
    grid.add_argument("--occlusion-grid", default=DEFAULT_OCCLUSION_GRID, help="comma-separated cell counts")
    grid.add_argument("--occlusion-fractions", help="comma-separated fractions of cells")
    score.add_argument("--map", action="store_true", help="also score MAP-imputed inputs")
    score.add_argument("--steps", type=int)
    score.add_argument("--lr", type=float)

    ev = sub.add_parser(Command.EVAL.value, help="summarise a results CSV into a report and an SVG plot")
    ev.add_argument("--pred-csv", required=True, type=Path)
    ev.add_argument("--out-svg", required=True, type=Path)
    ev.add_argument("--out-report", type=Path)

    insp = sub.add_parser(Command.INSPECT.value, help="print a checkpoint's configuration")
    insp.add_argument("--checkpoint", required=True, type=Path)

    for child in (synth, trainp, gen, imp, score, ev, insp):
        _add_common(child)
    return parser


_COMMANDS = {
    Command.SYNTH: cmd_synth,
    Command.TRAIN: cmd_train,
    Command.GENERATE: cmd_generate,
    Command.IMPUTE: cmd_impute,
    Command.SCORE: cmd_score,
    Command.EVAL: cmd_eval,
    Command.INSPECT: cmd_inspect,
}


def _configure_logging(args: argparse.Namespace) -> None:
    level = getattr(logging, args.log_level)
    if args.verbose:
        level = min(level, logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _fail(code: int, message: str) -> int:
    print(f"hgvae: error: {message}", file=sys.stderr)
    return code


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv`` and run one command; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    _configure_logging(args)
    try:
        return _COMMANDS[Command(args.command)](args, argv)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(EXIT_MISSING_FILE, f"{exc.strerror or exc}: {exc.filename}")
    except NonFiniteError as exc:
        return _fail(EXIT_NON_FINITE, str(exc))
    except ConditioningError as exc:
        return _fail(EXIT_CONDITIONING, str(exc))
    except (DatasetFormatError, CheckpointError) as exc:
        return _fail(EXIT_FORMAT, str(exc))
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or exc.title
        return _fail(EXIT_CONFIG, f"invalid configuration: {where}: {first['msg']}")
    except (ConfigFileError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except Exception as exc:
        logger.debug("unexpected failure", exc_info=True)
        return _fail(EXIT_UNEXPECTED, f"{type(exc).__name__}: {exc}")


def main() -> int:
    return run()
