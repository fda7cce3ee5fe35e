"""Confusion matrices, precision/recall/F1/accuracy, k-fold cross-validation
and the ablation harness.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from . import tensor as T
from .data import N_CLASSES, OversamplePlan, smote, stratified_folds
from .errors import ConfigError, DataFormatError, DimensionError, InceptoFormerError, LabelIndexError
from .model import VARIANTS, ablation_variant, build, classify
from .training import NadamState, batch_indices, fold_seed, stack_segments, train

log = logging.getLogger(__name__)

AVERAGES = ("macro", "weighted")
SUMMARY_METRICS = ("accuracy", "precision", "recall", "f1")


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def normalized(self):
        """Row-normalised copy; rows without samples stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


def confusion(true_labels, predicted_labels, n_classes=N_CLASSES):
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.ndim != 1 or true_labels.shape != predicted_labels.shape:
        raise DimensionError(
            f"label arrays must be 1-D and equal length, got {true_labels.shape} and {predicted_labels.shape}")
    for name, labels in (("true", true_labels), ("predicted", predicted_labels)):
        bad = labels[(labels < 0) | (labels >= n_classes)]
        if bad.size:
            raise LabelIndexError(f"{name} label {bad[0]} outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted_labels), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    tp: int
    fp: int
    fn: int
    tn: int
    empty: bool = False


def _f1(precision, recall):
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    """Per-class and averaged metrics for one evaluation or a set of folds.

    For a cross-validation report the headline numbers are means over
    ``per_fold``, ``std`` holds their standard deviations, ``confusion``
    pools every fold and ``mean_confusion`` is the element-wise fold mean.
    """

    per_class: list
    accuracy: float
    precision: float
    recall: float
    f1: float
    average: str
    confusion: ConfusionMatrix
    per_fold: list = field(default_factory=list)
    std: dict = field(default_factory=dict)
    mean_confusion: np.ndarray | None = None
    header: dict = field(default_factory=dict)

    def summary(self):
        return {name: getattr(self, name) for name in SUMMARY_METRICS}

    def to_dict(self):
        data = {
            "header": self.header,
            "average": self.average,
            "summary": self.summary(),
            "std": self.std,
            "per_class": [dataclasses.asdict(m) for m in self.per_class],
            "confusion": self.confusion.counts.tolist(),
            "per_fold": [f.to_dict() for f in self.per_fold],
        }
        if self.mean_confusion is not None:
            data["mean_confusion"] = self.mean_confusion.tolist()
        return data

    @classmethod
    def from_dict(cls, data):
        summary = data["summary"]
        mean_confusion = data.get("mean_confusion")
        return cls(
            per_class=[ClassMetrics(**m) for m in data["per_class"]],
            accuracy=summary["accuracy"],
            precision=summary["precision"],
            recall=summary["recall"],
            f1=summary["f1"],
            average=data["average"],
            confusion=ConfusionMatrix(np.array(data["confusion"], dtype=np.int64)),
            per_fold=[cls.from_dict(f) for f in data.get("per_fold", [])],
            std=data.get("std", {}),
            mean_confusion=None if mean_confusion is None else np.array(mean_confusion, dtype=np.float64),
            header=data.get("header", {}),
        )


def metrics(cm, average="macro"):
    """One-vs-rest TP/FP/FN/TN per class, then macro or support-weighted means.

    Classes with neither samples nor predictions are flagged ``empty`` and
    left out of the averages.
    """
    if average not in AVERAGES:
        raise ConfigError(f"average must be one of {AVERAGES}, got {average!r}")
    counts = cm.counts
    total = cm.total
    if total <= 0:
        raise ConfigError("cannot compute metrics of an empty confusion matrix")
    per_class = []
    for c in range(cm.n_classes):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        tn = total - tp - fp - fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        per_class.append(ClassMetrics(
            precision=precision, recall=recall, f1=_f1(precision, recall),
            support=tp + fn, tp=tp, fp=fp, fn=fn, tn=tn, empty=(tp + fn == 0 and fp == 0),
        ))
    used = [m for m in per_class if not m.empty]
    if average == "macro":
        weights = np.full(len(used), 1.0 / len(used))
    else:
        support = np.array([m.support for m in used], dtype=np.float64)
        weights = support / support.sum()
    return MetricsReport(
        per_class=per_class,
        accuracy=float(np.trace(counts)) / total * 100.0,
        precision=float(sum(w * m.precision for w, m in zip(weights, used))),
        recall=float(sum(w * m.recall for w, m in zip(weights, used))),
        f1=float(sum(w * m.f1 for w, m in zip(weights, used))),
        average=average,
        confusion=cm,
    )


def aggregate(fold_reports, average="macro", header=None):
    """Mean and standard deviation of the fold summaries."""
    if not fold_reports:
        raise ConfigError("no fold reports to aggregate")
    stacked = np.stack([r.confusion.counts for r in fold_reports])
    pooled = metrics(ConfusionMatrix(stacked.sum(axis=0)), average)
    means = {k: float(np.mean([r.summary()[k] for r in fold_reports])) for k in SUMMARY_METRICS}
    stds = {k: float(np.std([r.summary()[k] for r in fold_reports])) for k in SUMMARY_METRICS}
    return MetricsReport(
        per_class=pooled.per_class,
        average=average,
        confusion=pooled.confusion,
        per_fold=list(fold_reports),
        std=stds,
        mean_confusion=stacked.mean(axis=0),
        header=dict(header or {}),
        **means,
    )


def predict_segments(model, segments, batch_size=64):
    inputs, labels = stack_segments(segments)
    model.eval()
    predictions = []
    with T.no_grad():
        for idx in batch_indices(len(labels), batch_size):
            classes, _ = classify(model(inputs[idx]))
            predictions.append(classes)
    return labels, np.concatenate(predictions)


@dataclass
class FoldOutcome:
    fold: object
    report: MetricsReport
    model: object
    train_result: object
    plan: dict | None
    seed: int


def run_fold(fold, segments_by_id, model_config, train_config, seed, smote_mode="per-fold",
             k_neighbors=5, average="macro", resume=None):
    """Oversample the training side if asked, train, score the validation side.

    ``resume`` is a loaded Checkpoint of this fold; training continues from
    its weights and optimizer state instead of a fresh model.
    """
    n_classes = model_config.n_classes
    train_segments = [segments_by_id[i] for i in fold.train_segment_ids]
    val_segments = [segments_by_id[i] for i in fold.val_segment_ids]
    seed_f = fold_seed(seed, fold.fold_index)
    plan = None
    try:
        if smote_mode == "per-fold":
            plan = OversamplePlan.from_segments(train_segments, n_classes, k_neighbors=k_neighbors)
            train_segments = smote(train_segments, plan, seed_f)
        if resume is None:
            model, optimizer = build(model_config, seed_f), None
        else:
            if resume.extra.get("fold") != fold.fold_index:
                raise ConfigError(f"checkpoint belongs to fold {resume.extra.get('fold')}")
            model = resume.model
            optimizer = NadamState.from_payload(resume.optimizer) if resume.optimizer else None
        result = train(model, train_segments, val_segments, dataclasses.replace(train_config, seed=seed_f),
                       optimizer=optimizer, fold=fold.fold_index)
        labels, predicted = predict_segments(model, val_segments, train_config.batch_size)
    except InceptoFormerError as e:
        raise type(e)(f"fold {fold.fold_index}: {e}") from None
    report = metrics(confusion(labels, predicted, n_classes), average)
    log.info("[FOLD] fold=%d accuracy=%.2f f1=%.4f best_epoch=%d",
             fold.fold_index, report.accuracy, report.f1, result.best_epoch)
    return FoldOutcome(fold, report, model, result, plan.to_dict() if plan else None, seed_f)


def cross_validate(segments, model_config, train_config, k=10, unit="segment", seed=0,
                   smote_mode="per-fold", k_neighbors=5, average="macro", variant=None, jobs=1):
    """k-fold cross-validation; returns (aggregate report, fold outcomes).

    ``smote_mode="global"`` oversamples the whole pool before splitting,
    ``"per-fold"`` only each training side, ``"off"`` never.
    """
    if smote_mode not in ("per-fold", "global", "off"):
        raise ConfigError(f"smote_mode must be 'per-fold', 'global' or 'off', got {smote_mode!r}")
    if variant is not None:
        model_config = ablation_variant(model_config, variant)
    model_config.validate()
    train_config.validate()
    global_plan = None
    if smote_mode == "global":
        global_plan = OversamplePlan.from_segments(segments, model_config.n_classes, k_neighbors=k_neighbors)
        segments = smote(segments, global_plan, seed)
    folds = stratified_folds(segments, k, unit, seed)
    by_id = {s.segment_id: s for s in segments}
    if len(by_id) != len(segments):
        raise DataFormatError("segment ids are not unique")
    outcomes = Parallel(n_jobs=jobs)(
        delayed(run_fold)(fold, by_id, model_config, train_config, seed, smote_mode, k_neighbors, average)
        for fold in folds
    )
    header = {
        "variant": variant or "model3",
        "k": k,
        "unit": unit,
        "seed": seed,
        "fold_seeds": [o.seed for o in outcomes],
        "smote_mode": smote_mode,
        "k_neighbors": k_neighbors,
        "average": average,
        "model_config_hash": model_config.config_hash(),
        "train_config_hash": train_config.config_hash(),
        "pd_fraction": [f.pd_fraction for f in folds],
        "global_plan": global_plan.to_dict() if global_plan else None,
    }
    report = aggregate([o.report for o in outcomes], average, header)
    log.info("[CROSSVAL] variant=%s k=%d accuracy=%.2f+-%.2f f1=%.4f",
             header["variant"], k, report.accuracy, report.std["accuracy"], report.f1)
    return report, outcomes


@dataclass
class AblationTable:
    reports: dict
    reference: str = "model3"

    def deltas(self):
        """Per-variant metric differences from the reference, in percentage points."""
        ref = _as_percent(self.reports[self.reference].summary())
        return {
            v: {k: _as_percent(r.summary())[k] - ref[k] for k in SUMMARY_METRICS}
            for v, r in self.reports.items()
        }

    def render(self):
        deltas = self.deltas()
        lines = [f"{'Variant':<8} " + " ".join(f"{k.capitalize():>18}" for k in SUMMARY_METRICS)]
        for variant, report in self.reports.items():
            values = _as_percent(report.summary())
            cells = []
            for k in SUMMARY_METRICS:
                cell = f"{values[k]:.2f}"
                if variant != self.reference:
                    d = deltas[variant][k]
                    arrow = "↓" if d < 0 else "↑" if d > 0 else "="
                    cell += f" ({arrow}{abs(d):.2f})"
                cells.append(f"{cell:>18}")
            lines.append(f"{variant:<8} " + " ".join(cells))
        return "\n".join(lines)

    def to_dict(self):
        return {
            "reference": self.reference,
            "reports": {v: r.to_dict() for v, r in self.reports.items()},
            "deltas": self.deltas(),
        }

    @classmethod
    def from_dict(cls, data):
        reports = {v: MetricsReport.from_dict(r) for v, r in data["reports"].items()}
        return cls(reports, data.get("reference", "model3"))


def _as_percent(summary):
    return {k: v if k == "accuracy" else 100.0 * v for k, v in summary.items()}


def ablate(segments, base_config, train_config, k=10, unit="segment", seed=0, smote_mode="per-fold",
           k_neighbors=5, average="macro", jobs=1):
    """Cross-validate every ablation variant on the same folds."""
    reports = {}
    outcomes = {}
    for variant in VARIANTS:
        reports[variant], outcomes[variant] = cross_validate(
            segments, base_config, train_config, k, unit, seed, smote_mode, k_neighbors, average,
            variant, jobs)
    return AblationTable(reports), outcomes


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def write_report_json(path, report):
    return write_json(path, report.to_dict())


def read_report(path):
    """Load a saved MetricsReport or AblationTable."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: unreadable report ({e})") from None
    if "reports" in data:
        return AblationTable.from_dict(data)
    if "summary" not in data:
        raise DataFormatError(f"{path}: not a metrics report")
    return MetricsReport.from_dict(data)


def write_report_csv(path, report):
    """One row per fold plus mean and std rows."""
    rows = []
    folds = report.per_fold or [report]
    for i, fold in enumerate(folds):
        rows.append({"fold": str(i), **fold.summary()})
    if report.per_fold:
        rows.append({"fold": "mean", **report.summary()})
        rows.append({"fold": "std", **report.std})
    frame = pd.DataFrame(rows, columns=["fold", *SUMMARY_METRICS])
    frame.to_csv(path, index=False)
    return Path(path)


def render_report(report):
    """Operator-facing text summary."""
    lines = [f"average={report.average} accuracy={report.accuracy:.2f}%"]
    if report.std:
        lines[0] += f" (std {report.std['accuracy']:.2f})"
    lines.append(f"precision={report.precision:.4f} recall={report.recall:.4f} f1={report.f1:.4f}")
    for c, m in enumerate(report.per_class):
        flag = " empty" if m.empty else ""
        lines.append(f"  class {c}: precision={m.precision:.4f} recall={m.recall:.4f} "
                     f"f1={m.f1:.4f} support={m.support}{flag}")
    return "\n".join(lines)
