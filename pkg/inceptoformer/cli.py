"""Command-line entry point: preprocess, train, crossval, ablate, gradcheck, synth, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, config
from .checks import CHECKS, run_checks
from .data import (
    DEMOGRAPHICS_FILE,
    OversamplePlan,
    PipelineConfig,
    SynthSpec,
    class_counts,
    parse_directory,
    read_archive,
    render_histogram,
    segment_all,
    smote,
    stratified_folds,
    synth_dataset,
    write_archive,
    write_physionet,
)
from .errors import EXIT_NUMERICAL, EXIT_OK, ConfigError, DataFormatError, InceptoFormerError, SplitError
from .evaluation import (
    AblationTable,
    ablate,
    cross_validate,
    read_report,
    render_report,
    run_fold,
    write_json,
    write_report_csv,
    write_report_json,
)
from .model import VARIANTS, ModelConfig, ablation_variant, load_checkpoint, save_checkpoint
from .plots import plot_class_distribution, plot_confusion
from .training import TrainConfig, write_history

log = logging.getLogger(__name__)

ARCHIVE_NAME = "segments.ifseg"

# flag dest -> config field
MODEL_FLAGS = {
    "filters": "filters_per_stream",
    "kernel_sizes": "kernel_sizes",
    "cascade_depth": "cascade_depth",
    "temporal_heads": "temporal_heads",
    "spatial_heads": "spatial_heads",
    "transformer_layers": "transformer_layers",
    "ff_expansion": "ff_expansion",
    "reduced_dim": "reduced_dim",
    "classifier_widths": "classifier_widths",
    "model_dropout": "dropout",
    "pe_scale": "pe_scale",
    "pe_norm": "pe_norm",
}
TRAIN_FLAGS = {
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "max_epochs": "max_epochs",
    "patience": "early_stop_patience",
    "min_delta": "early_stop_min_delta",
    "dropout": "dropout",
    "grad_clip": "grad_clip",
}
PIPELINE_FLAGS = {
    "segment_len": "segment_len",
    "overlap": "overlap",
    "k_neighbors": "k_neighbors",
    "k": "k_folds",
    "unit": "unit",
    "average": "average",
}


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# Configuration resolution
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    pipeline: PipelineConfig
    seed: int

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "seed": self.seed,
        }


def _load_config_file(path):
    try:
        tree = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(tree, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(tree) - {"model", "train", "pipeline", "seed"})
    if unknown:
        raise ConfigError(f"unknown config section {unknown[0]!r}")
    return tree


def _overrides(args, flags):
    return {field: getattr(args, dest) for dest, field in flags.items() if getattr(args, dest, None) is not None}


def resolve_config(args):
    """Defaults < --config file < explicit flags."""
    tree = _load_config_file(args.config) if getattr(args, "config", None) else {}
    try:
        model = ModelConfig.from_dict(tree.get("model", {}))
        train = TrainConfig.from_dict(tree.get("train", {}))
        pipeline = PipelineConfig.from_dict(tree.get("pipeline", {}))
        model = dataclasses.replace(model, **_overrides(args, MODEL_FLAGS))
        train = dataclasses.replace(train, **_overrides(args, TRAIN_FLAGS))
        pipeline = dataclasses.replace(pipeline, **_overrides(args, PIPELINE_FLAGS))
        if getattr(args, "smote_global", False):
            pipeline = dataclasses.replace(pipeline, smote_mode="global")
        elif getattr(args, "no_smote", False):
            pipeline = dataclasses.replace(pipeline, smote_mode="off")
        seed = args.seed if getattr(args, "seed", None) is not None else int(tree.get("seed", 0))
        train = dataclasses.replace(train, seed=seed)
        model.validate()
        train.validate()
        pipeline.validate()
    except TypeError as e:
        raise ConfigError(f"invalid configuration value: {e}") from None
    return RunConfig(model, train, pipeline, seed)


def write_manifest(out_dir, command, run=None, **inputs):
    """Resolved configuration and inputs, written before any computation."""
    manifest = {"command": command, "version": __version__, "inputs": inputs}
    if run is not None:
        manifest.update(run.to_dict())
        manifest["model_config_hash"] = run.model.config_hash()
        manifest["train_config_hash"] = run.train.config_hash()
    return write_json(Path(out_dir) / "manifest.json", manifest)


def _load_segments(path, model_config):
    segments, header = read_archive(path)
    length = segments[0].values.shape[0]
    if model_config.segment_len != length:
        log.info("[CONFIG] segment_len=%d taken from archive", length)
        model_config = dataclasses.replace(model_config, segment_len=length)
    return segments, header, model_config


def _smote_mode(segments, pipeline):
    if any(s.origin == "synthetic" for s in segments) and pipeline.smote_mode != "off":
        log.info("[SMOTE] archive is already oversampled, skipping further oversampling")
        return "off"
    return pipeline.smote_mode


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_preprocess(args):
    run = resolve_config(args)
    data_dir = Path(args.data_dir)
    demographics = Path(args.demographics) if args.demographics else data_dir / DEMOGRAPHICS_FILE
    out_dir = Path(args.out_dir)
    write_manifest(out_dir, "preprocess", run, data_dir=str(data_dir), demographics=str(demographics))
    if not data_dir.is_dir():
        raise DataFormatError(f"data directory not found: {data_dir}")
    if not demographics.is_file():
        raise DataFormatError(f"demographics table not found: {demographics}")

    records, errors = parse_directory(data_dir, demographics, args.jobs)
    if errors:
        for message in errors:
            print(f"Error: {message}", file=sys.stderr, flush=True)
        raise DataFormatError(f"{len(errors)} walk file(s) could not be parsed")
    if not records:
        raise DataFormatError(f"no walk files found in {data_dir}")

    p = run.pipeline
    segments = segment_all(records, p.segment_len, p.overlap)
    if not segments:
        raise DataFormatError(f"no walk is at least {p.segment_len} steps long")
    before = class_counts(segments)
    print(f"Segments per class ({len(segments)} from {len(records)} walks):", flush=True)
    print(render_histogram(before), flush=True)

    provenance = None
    if p.smote_mode == "global":
        plan = OversamplePlan.from_segments(segments, k_neighbors=p.k_neighbors)
        segments = smote(segments, plan, run.seed)
        provenance = plan.to_dict()
        print("After oversampling:", flush=True)
        print(render_histogram(class_counts(segments)), flush=True)

    try:
        folds = [f.to_dict() for f in stratified_folds(segments, p.k_folds, p.unit, run.seed)]
    except SplitError as e:
        log.warning("[FOLDS] not recorded: %s", e)
        folds = None

    archive = out_dir / ARCHIVE_NAME
    write_archive(archive, segments, {
        "seed": run.seed,
        "pipeline": p.to_dict(),
        "smote": provenance,
        "folds": folds,
        "subjects": sorted({r.subject_id for r in records}),
    })
    plot_class_distribution(before, class_counts(segments), out_dir / "class_distribution.svg")
    print(f"Archive written: {archive}", flush=True)
    return EXIT_OK


def _save_fold(out_dir, outcome):
    fold_dir = Path(out_dir) / f"fold_{outcome.fold.fold_index:02d}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    result = outcome.train_result
    save_checkpoint(
        fold_dir / "checkpoint.ifckpt",
        outcome.model,
        result.optimizer.to_payload(),
        {"fold": outcome.fold.fold_index, "best_epoch": result.best_epoch, "seed": outcome.seed,
         "smote_plan": outcome.plan},
    )
    write_history(fold_dir / "history.csv", result.history)
    write_report_json(fold_dir / "report.json", outcome.report)


def _write_crossval(out_dir, report, outcomes):
    for outcome in outcomes:
        _save_fold(out_dir, outcome)
    write_report_json(out_dir / "report.json", report)
    write_report_csv(out_dir / "report.csv", report)
    plot_confusion(_row_normalise(report.mean_confusion), out_dir / "confusion.svg",
                   f"Confusion matrix ({report.header.get('variant', 'model3')})")


def _row_normalise(matrix):
    rows = matrix.sum(axis=1, keepdims=True)
    return np.divide(matrix, rows, out=np.zeros(matrix.shape), where=rows > 0)


def cmd_train(args):
    run = resolve_config(args)
    out_dir = Path(args.out_dir)
    write_manifest(out_dir, "train", run, archive=str(args.archive), fold=args.fold, variant=args.variant,
                   resume=args.resume)
    segments, _, model_config = _load_segments(args.archive, run.model)
    if args.variant:
        model_config = ablation_variant(model_config, args.variant)
    p = run.pipeline
    folds = stratified_folds(segments, p.k_folds, p.unit, run.seed)
    if not 0 <= args.fold < len(folds):
        raise ConfigError(f"fold must be in [0, {len(folds)}), got {args.fold}")
    smote_mode = _smote_mode(segments, p)
    if smote_mode == "global":
        raise ConfigError("train oversamples per fold; build a globally oversampled archive with preprocess --smote-global")
    resume = load_checkpoint(args.resume, model_config) if args.resume else None
    outcome = run_fold(folds[args.fold], {s.segment_id: s for s in segments}, model_config, run.train,
                       run.seed, smote_mode, p.k_neighbors, p.average, resume)
    _save_fold(out_dir, outcome)
    print(render_report(outcome.report), flush=True)
    return EXIT_OK


def cmd_crossval(args):
    run = resolve_config(args)
    out_dir = Path(args.out_dir)
    write_manifest(out_dir, "crossval", run, archive=str(args.archive), variant=args.variant or "model3")
    segments, _, model_config = _load_segments(args.archive, run.model)
    p = run.pipeline
    smote_mode = _smote_mode(segments, p)
    report, outcomes = cross_validate(
        segments, model_config, run.train, p.k_folds, p.unit, run.seed, smote_mode, p.k_neighbors,
        p.average, args.variant, args.jobs)
    if smote_mode != p.smote_mode:
        report.header["smote_mode"] = "global"
    _write_crossval(out_dir, report, outcomes)
    print(render_report(report), flush=True)
    return EXIT_OK


def cmd_ablate(args):
    run = resolve_config(args)
    out_dir = Path(args.out_dir)
    write_manifest(out_dir, "ablate", run, archive=str(args.archive))
    segments, _, model_config = _load_segments(args.archive, run.model)
    p = run.pipeline
    smote_mode = _smote_mode(segments, p)
    table, outcomes = ablate(segments, model_config, run.train, p.k_folds, p.unit, run.seed, smote_mode,
                             p.k_neighbors, p.average, args.jobs)
    for variant, report in table.reports.items():
        _write_crossval(out_dir / variant, report, outcomes[variant])
    write_json(out_dir / "ablation.json", table.to_dict())
    print(table.render(), flush=True)
    return EXIT_OK


def cmd_gradcheck(args):
    if args.out_dir:
        write_manifest(args.out_dir, "gradcheck", None, checks=args.check or list(CHECKS),
                       eps=args.eps, tolerance=args.tolerance, seed=args.seed)
    results = run_checks(args.check, args.eps, args.tolerance, args.seed)
    lines = [r.line() for r in results]
    for line in lines:
        print(line, flush=True)
    if args.out_dir:
        (Path(args.out_dir) / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"Error: gradient check failed: {', '.join(failed)}", file=sys.stderr, flush=True)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_synth(args):
    spec = SynthSpec(
        n_subjects_per_class=args.subjects_per_class,
        n_timesteps=args.timesteps,
        noise_std=args.noise_std,
        seed=args.seed if args.seed is not None else 0,
        n_classes=args.classes,
    ).validate()
    out_dir = Path(args.out_dir)
    write_manifest(out_dir, "synth", None, spec=dataclasses.asdict(spec))
    records = synth_dataset(spec)
    write_physionet(records, out_dir, spec.sample_rate)
    print(f"Wrote {len(records)} walks to {out_dir}", flush=True)
    return EXIT_OK


def cmd_report(args):
    report = read_report(args.report)
    if isinstance(report, AblationTable):
        print(report.render(), flush=True)
        return EXIT_OK
    print(render_report(report), flush=True)
    if args.out_dir:
        matrix = report.mean_confusion if report.mean_confusion is not None else report.confusion.counts
        plot_confusion(_row_normalise(np.asarray(matrix, dtype=np.float64)),
                       Path(args.out_dir) / "confusion.svg")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(parser):
    parser.add_argument("--config", help="JSON file with model/train/pipeline/seed sections")
    parser.add_argument("--seed", type=int, help="Master seed (default: 0)")
    parser.add_argument("--jobs", type=int, default=config.JOBS,
                        help=f"Worker cap for parallel parsing and folds (default: {config.JOBS})")


def _add_pipeline(parser):
    parser.add_argument("--k", type=int, help="Cross-validation folds (default: 10)")
    parser.add_argument("--unit", choices=("segment", "subject"), help="Fold unit (default: segment)")
    parser.add_argument("--k-neighbors", type=int, help="SMOTE neighbours (default: 5)")
    parser.add_argument("--average", choices=("macro", "weighted"), help="Metric averaging (default: macro)")
    smote_group = parser.add_mutually_exclusive_group()
    smote_group.add_argument("--smote-global", action="store_true",
                             help="Oversample the whole pool before splitting")
    smote_group.add_argument("--no-smote", action="store_true", help="Disable oversampling")


def _add_model(parser):
    parser.add_argument("--filters", type=int, help="Filters per Inception stream (default: 32)")
    parser.add_argument("--kernel-sizes", type=_int_list, help="Odd kernel sizes (default: 1,3,5)")
    parser.add_argument("--cascade-depth", type=int, help="Inception blocks per signal (default: 3)")
    parser.add_argument("--temporal-heads", type=int, help="Temporal attention heads (default: 2)")
    parser.add_argument("--spatial-heads", type=int, help="Spatial attention heads (default: 2)")
    parser.add_argument("--transformer-layers", type=int, help="Encoder blocks per transformer (default: 1)")
    parser.add_argument("--ff-expansion", type=int, help="Feed-forward expansion (default: 4)")
    parser.add_argument("--reduced-dim", type=int, help="Per-signal reduced width (default: 32)")
    parser.add_argument("--classifier-widths", type=_int_list, help="Hidden widths (default: 128,64)")
    parser.add_argument("--model-dropout", type=float, help="Dropout stored in the model config (default: 0.2)")
    parser.add_argument("--pe-scale", type=float, help="Positional-encoding scale (default: 0.1)")
    parser.add_argument("--pe-norm", choices=("scale", "unit", "none"), help="Positional-encoding mode")


def _add_train(parser):
    parser.add_argument("--batch-size", type=int, help="Batch size (default: 64)")
    parser.add_argument("--lr", type=float, help="Nadam learning rate (default: 1e-4)")
    parser.add_argument("--max-epochs", type=int, help="Epoch limit (default: 500)")
    parser.add_argument("--patience", type=int, help="Early-stopping patience (default: 10)")
    parser.add_argument("--min-delta", type=float, help="Early-stopping minimum improvement (default: 1e-4)")
    parser.add_argument("--dropout", type=float, help="Training dropout rate (default: 0.2)")
    parser.add_argument("--grad-clip", type=float, nargs="?", const=5.0,
                        help="Clip the global gradient norm (flag alone: 5.0)")


def build_parser():
    parser = argparse.ArgumentParser(prog="inceptoformer", description="InceptoFormer gait severity pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", choices=("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"),
                        help=f"Logging level (default: {config.LOG_LEVEL})")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    pre = subparsers.add_parser("preprocess", help="Parse, segment and archive walk files")
    pre.add_argument("--data-dir", default=config.DATA_DIR, help=f"Walk files (default: {config.DATA_DIR})")
    pre.add_argument("--demographics", help=f"Demographics table (default: DATA_DIR/{DEMOGRAPHICS_FILE})")
    pre.add_argument("--out-dir", default="preprocessed", help="Output directory (default: preprocessed)")
    pre.add_argument("--segment-len", type=int, help="Segment length in steps (default: 100)")
    pre.add_argument("--overlap", type=float, help="Segment overlap fraction (default: 0.5)")
    pre.add_argument("--k-neighbors", type=int, help="SMOTE neighbours (default: 5)")
    pre.add_argument("--smote-global", action="store_true", help="Oversample the archive")
    _add_common(pre)

    tr = subparsers.add_parser("train", help="Train one fold of the stratified split")
    tr.add_argument("archive", help="Segment archive from preprocess")
    tr.add_argument("--fold", type=int, default=0, help="Fold index to train (default: 0)")
    tr.add_argument("--variant", choices=VARIANTS, help="Ablation variant (default: model3)")
    tr.add_argument("--out-dir", default="run", help="Output directory (default: run)")
    tr.add_argument("--resume", help="Continue from this fold's checkpoint.ifckpt")
    _add_common(tr)
    _add_pipeline(tr)
    _add_model(tr)
    _add_train(tr)

    cv = subparsers.add_parser("crossval", help="k-fold cross-validation with reports")
    cv.add_argument("archive", help="Segment archive from preprocess")
    cv.add_argument("--variant", choices=VARIANTS, help="Ablation variant (default: model3)")
    cv.add_argument("--out-dir", default="crossval", help="Output directory (default: crossval)")
    _add_common(cv)
    _add_pipeline(cv)
    _add_model(cv)
    _add_train(cv)

    ab = subparsers.add_parser("ablate", help="Cross-validate model1, model2 and model3")
    ab.add_argument("archive", help="Segment archive from preprocess")
    ab.add_argument("--out-dir", default="ablation", help="Output directory (default: ablation)")
    _add_common(ab)
    _add_pipeline(ab)
    _add_model(ab)
    _add_train(ab)

    gc = subparsers.add_parser("gradcheck", help="Finite-difference gradient checks")
    gc.add_argument("--check", action="append", choices=sorted(CHECKS), help="Run only this check (repeatable)")
    gc.add_argument("--eps", type=float, default=1e-5, help="Perturbation size (default: 1e-5)")
    gc.add_argument("--tolerance", type=float, default=1e-4, help="Max relative error (default: 1e-4)")
    gc.add_argument("--seed", type=int, default=0, help="Seed (default: 0)")
    gc.add_argument("--out-dir", help="Also write manifest and results here")

    sy = subparsers.add_parser("synth", help="Write a synthetic gait dataset")
    sy.add_argument("--out-dir", default=config.DATA_DIR, help=f"Output directory (default: {config.DATA_DIR})")
    sy.add_argument("--subjects-per-class", type=int, default=5, help="Subjects per class (default: 5)")
    sy.add_argument("--timesteps", type=int, default=3000, help="Steps per walk (default: 3000)")
    sy.add_argument("--noise-std", type=float, default=5.0, help="Gaussian noise in newtons (default: 5.0)")
    sy.add_argument("--classes", type=int, default=4, help="Number of classes (default: 4)")
    sy.add_argument("--seed", type=int, help="Seed (default: 0)")

    rp = subparsers.add_parser("report", help="Re-render a saved report")
    rp.add_argument("report", help="report.json or ablation.json")
    rp.add_argument("--out-dir", help="Write the confusion heat map here")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    config.configure_logging(args.log_level)
    if not args.command:
        parser.print_help()
        return EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except InceptoFormerError as e:
        print(f"Error: {e}", file=sys.stderr, flush=True)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
