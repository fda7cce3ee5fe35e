"""Walk ingestion, segmentation, SMOTE oversampling, stratified folds and
synthetic gait surrogates.

Walk files follow the Physionet gait layout: 19 whitespace-separated numeric
columns per 10 ms row (time in seconds, 8 sensors per foot, then the total
force under each foot).
"""

from __future__ import annotations

import dataclasses
import logging
import re
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.model_selection import StratifiedGroupKFold, StratifiedKFold
from sklearn.neighbors import NearestNeighbors

from .errors import (
    ConfigError,
    DataFormatError,
    InceptoFormerError,
    LabelingError,
    OversamplingError,
    SplitError,
)
from .fileformat import read_container, write_container

log = logging.getLogger(__name__)

N_SIGNALS = 18
FILE_COLUMNS = N_SIGNALS + 1
N_CLASSES = 4
SEGMENT_LEN = 100
OVERLAP = 0.5
MINORITY_CLASSES = (0, 3)
CLASS_NAMES = ("Healthy", "H&Y 2", "H&Y 2.5", "H&Y 3")
CLASS_BY_STAGE = {2.0: 1, 2.5: 2, 3.0: 3}
ARCHIVE_MAGIC = b"IFSEGA01"
ARCHIVE_VERSION = 1
DEMOGRAPHICS_FILE = "demographics.txt"
WALK_FILE_PATTERN = re.compile(r"^[A-Za-z]+\d+_\d+\.txt$")

_PD_CODES = {"pd", "1", "parkinsonian", "patient", "pt"}
_CONTROL_CODES = {"co", "2", "control", "healthy", "ctrl"}


@dataclass(frozen=True, eq=False)
class SignalRecord:
    subject_id: str
    group: str
    hy_stage: float
    label: int
    channels: np.ndarray
    source_file: str = ""

    def __post_init__(self):
        if self.channels.ndim != 2 or self.channels.shape[0] != N_SIGNALS:
            raise DataFormatError(
                f"{self.subject_id}: expected {N_SIGNALS} channels, got array {self.channels.shape}")

    @property
    def n_timesteps(self):
        return self.channels.shape[1]


@dataclass(eq=False)
class Segment:
    """A time x sensor window of one walk, or a SMOTE interpolation of two."""

    segment_id: str
    values: np.ndarray
    label: int
    subject_id: str
    origin: str = "real"
    synth_parents: tuple | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != N_SIGNALS:
            raise DataFormatError(f"segment {self.segment_id}: expected T x {N_SIGNALS}, got {self.values.shape}")
        if self.origin not in ("real", "synthetic"):
            raise DataFormatError(f"segment {self.segment_id}: unknown origin {self.origin!r}")
        if self.origin == "synthetic" and (not self.synth_parents or len(self.synth_parents) != 2):
            raise DataFormatError(f"synthetic segment {self.segment_id} must record two parents")


@dataclass(frozen=True)
class PipelineConfig:
    """Segmentation, oversampling and cross-validation options."""

    segment_len: int = SEGMENT_LEN
    overlap: float = OVERLAP
    k_neighbors: int = 5
    k_folds: int = 10
    unit: str = "segment"
    smote_mode: str = "per-fold"
    average: str = "macro"

    def validate(self):
        if self.segment_len < 1:
            raise ConfigError(f"segment_len must be >= 1, got {self.segment_len}")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.k_neighbors < 1:
            raise ConfigError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if self.k_folds < 2:
            raise ConfigError(f"k_folds must be >= 2, got {self.k_folds}")
        if self.unit not in ("segment", "subject"):
            raise ConfigError(f"unit must be 'segment' or 'subject', got {self.unit!r}")
        if self.smote_mode not in ("per-fold", "global", "off"):
            raise ConfigError(f"smote_mode must be 'per-fold', 'global' or 'off', got {self.smote_mode!r}")
        if self.average not in ("macro", "weighted"):
            raise ConfigError(f"average must be 'macro' or 'weighted', got {self.average!r}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown pipeline config field {unknown[0]!r}")
        return cls(**data)


def stage_to_label(group, hy_stage):
    """healthy -> 0, H&Y 2 -> 1, H&Y 2.5 -> 2, H&Y 3 -> 3."""
    if group == "control":
        return 0
    label = CLASS_BY_STAGE.get(float(hy_stage))
    if label is None:
        raise LabelingError(f"no severity class for Hoehn & Yahr stage {hy_stage}")
    return label


def _parse_group(value):
    code = str(value).strip().lower()
    if code in _PD_CODES:
        return "parkinsonian"
    if code in _CONTROL_CODES:
        return "control"
    raise LabelingError(f"unknown group code {value!r}")


def _find_column(columns, names, path):
    for name in names:
        if name in columns:
            return columns[name]
    raise DataFormatError(f"{path}: no column named any of {list(names)}")


def load_demographics(path):
    """Map subject id -> (group, H&Y stage) from a delimited demographics table."""
    try:
        frame = pd.read_csv(path, sep=None, engine="python", dtype=str)
    except pd.errors.EmptyDataError:
        raise DataFormatError(f"{path}: empty demographics table") from None
    columns = {re.sub(r"[^a-z0-9]", "", c.lower()): c for c in frame.columns}
    id_col = _find_column(columns, ("id", "subjectid", "subject"), path)
    group_col = _find_column(columns, ("group",), path)
    stage_col = _find_column(columns, ("hoehnyahr", "hy", "hystage"), path)
    table = {}
    for _, row in frame.iterrows():
        subject = str(row[id_col]).strip()
        if not subject or subject.lower() == "nan":
            continue
        group = _parse_group(row[group_col])
        raw_stage = row[stage_col]
        stage = 0.0 if pd.isna(raw_stage) or not str(raw_stage).strip() else float(raw_stage)
        table[subject] = (group, 0.0 if group == "control" else stage)
    return table


def subject_id_from_path(path):
    return Path(path).stem.split("_")[0]


def parse_vgrf(file, demographics):
    """Read one walk file into a labelled SignalRecord.

    ``demographics`` is a path or an already loaded mapping. Rows holding
    non-numeric entries are dropped with a warning.
    """
    path = Path(file)
    if not isinstance(demographics, Mapping):
        demographics = load_demographics(demographics)
    subject = subject_id_from_path(path)
    if subject not in demographics:
        raise LabelingError(f"{path.name}: subject {subject} missing from demographics")
    try:
        frame = pd.read_csv(path, sep=r"\s+", header=None, dtype=str)
    except pd.errors.EmptyDataError:
        raise DataFormatError(f"{path.name}: empty file") from None
    except pd.errors.ParserError as e:
        raise DataFormatError(f"{path.name}: {e}") from None
    if frame.shape[1] != FILE_COLUMNS:
        raise DataFormatError(f"{path.name}: expected {FILE_COLUMNS} columns, found {frame.shape[1]}")
    values = frame.apply(pd.to_numeric, errors="coerce")
    bad = values.isna().any(axis=1)
    if bad.any():
        log.warning("[PARSE] rejected rows file=%s count=%d first_row=%d",
                    path.name, int(bad.sum()), int(np.flatnonzero(bad.to_numpy())[0]) + 1)
        values = values[~bad]
    if values.empty:
        raise DataFormatError(f"{path.name}: no numeric rows")
    group, stage = demographics[subject]
    channels = np.ascontiguousarray(values.iloc[:, 1:].to_numpy(dtype=np.float64).T)
    return SignalRecord(subject, group, stage, stage_to_label(group, stage), channels, str(path))


def _parse_or_report(path, demographics):
    try:
        return parse_vgrf(path, demographics), None
    except InceptoFormerError as e:
        return None, str(e)


def walk_files(data_dir):
    return sorted(p for p in Path(data_dir).iterdir() if WALK_FILE_PATTERN.match(p.name))


def parse_directory(data_dir, demographics, jobs=1):
    """Parse every walk file in ``data_dir``; returns (records, error messages)."""
    table = load_demographics(demographics)
    paths = walk_files(data_dir)
    results = Parallel(n_jobs=jobs)(delayed(_parse_or_report)(p, table) for p in paths)
    records = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    log.info("[PARSE] files=%d records=%d errors=%d", len(paths), len(records), len(errors))
    return records, errors


def segment(record, length=SEGMENT_LEN, overlap=OVERLAP):
    """Fixed windows of ``length`` steps advancing by length * (1 - overlap)."""
    if length < 1:
        raise ConfigError(f"segment length must be >= 1, got {length}")
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must be in [0, 1), got {overlap}")
    stride = max(1, int(round(length * (1.0 - overlap))))
    n = record.n_timesteps
    if n < length:
        log.warning("[SEGMENT] skipped subject=%s n_timesteps=%d needed=%d", record.subject_id, n, length)
        return []
    stem = Path(record.source_file).stem or record.subject_id
    return [
        Segment(f"{stem}@{start}", record.channels[:, start:start + length].T.copy(),
                record.label, record.subject_id)
        for start in range(0, n - length + 1, stride)
    ]


def segment_all(records, length=SEGMENT_LEN, overlap=OVERLAP):
    return [s for r in records for s in segment(r, length, overlap)]


def class_counts(segments, n_classes=N_CLASSES, origin=None):
    counts = Counter(s.label for s in segments if origin is None or s.origin == origin)
    return {c: counts.get(c, 0) for c in range(n_classes)}


# ---------------------------------------------------------------------------
# SMOTE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OversamplePlan:
    """How many synthetic samples each class receives.

    Minority classes are raised to the majority count; every other class
    keeps n_new = 0 even when it sits below the majority.
    """

    class_counts: dict
    majority_class: int
    n_new: dict
    k_neighbors: int = 5

    @classmethod
    def from_counts(cls, counts, minority_classes=MINORITY_CLASSES, k_neighbors=5):
        counts = {int(c): int(n) for c, n in sorted(counts.items())}
        majority = max(counts, key=lambda c: counts[c])
        n_new = {
            c: max(counts[majority] - n, 0) if c in minority_classes else 0
            for c, n in counts.items()
        }
        return cls(counts, majority, n_new, k_neighbors)

    @classmethod
    def from_segments(cls, segments, n_classes=N_CLASSES, minority_classes=MINORITY_CLASSES, k_neighbors=5):
        """Plan over the classes that have at least one real segment."""
        counts = {c: n for c, n in class_counts(segments, n_classes, origin="real").items() if n}
        if not counts:
            raise OversamplingError("no real segments to oversample")
        return cls.from_counts(counts, minority_classes, k_neighbors)

    @property
    def final_counts(self):
        return {c: n + self.n_new[c] for c, n in self.class_counts.items()}

    def to_dict(self):
        return {
            "class_counts": {str(c): n for c, n in self.class_counts.items()},
            "majority_class": self.majority_class,
            "n_new": {str(c): n for c, n in self.n_new.items()},
            "k_neighbors": self.k_neighbors,
        }


def _neighbor_table(points, k):
    """Indices of the k nearest other rows of ``points`` (Euclidean)."""
    finder = NearestNeighbors(n_neighbors=k + 1, algorithm="brute").fit(points)
    nearest = finder.kneighbors(points, return_distance=False)
    table = np.empty((len(points), k), dtype=np.int64)
    for i, row in enumerate(nearest):
        others = [j for j in row if j != i]
        table[i] = others[:k]
    return table


def smote(segments, plan, seed, lam_range=(0.0, 1.0)):
    """Return ``segments`` plus the synthetic segments ``plan`` asks for.

    Neighbours are searched on flattened segments z-scored per channel over
    the real pool; interpolation happens on the raw values as
    x_new = x_i + lam * (x_j - x_i) with lam ~ U(lam_range).
    """
    if plan.k_neighbors < 1:
        raise ConfigError(f"k_neighbors must be >= 1, got {plan.k_neighbors}")
    real = [s for s in segments if s.origin == "real"]
    if not any(plan.n_new.values()):
        return list(segments)
    rng = np.random.default_rng(seed)
    stacked = np.stack([s.values for s in real])
    mean = stacked.mean(axis=(0, 1))
    std = stacked.std(axis=(0, 1))
    std[std == 0] = 1.0
    scaled = ((stacked - mean) / std).reshape(len(real), -1)

    synthetic = []
    for label in sorted(plan.n_new):
        needed = plan.n_new[label]
        if needed == 0:
            continue
        members = [i for i, s in enumerate(real) if s.label == label]
        if len(members) < 2:
            raise OversamplingError(f"class {label} has {len(members)} real segments, SMOTE needs >= 2")
        if plan.k_neighbors >= len(members):
            raise ConfigError(f"k_neighbors={plan.k_neighbors} must be below class {label} size {len(members)}")
        neighbors = _neighbor_table(scaled[members], plan.k_neighbors)
        for n in range(needed):
            a = int(rng.integers(len(members)))
            b = int(neighbors[a, int(rng.integers(plan.k_neighbors))])
            lam = rng.uniform(*lam_range)
            xi, xj = real[members[a]], real[members[b]]
            synthetic.append(Segment(
                f"synth-c{label}-{n:06d}",
                xi.values + lam * (xj.values - xi.values),
                label,
                xi.subject_id,
                origin="synthetic",
                synth_parents=(xi.segment_id, xj.segment_id),
            ))
        log.info("[SMOTE] class=%d real=%d synthetic=%d k=%d", label, len(members), needed, plan.k_neighbors)
    return list(segments) + synthetic


# ---------------------------------------------------------------------------
# Cross-validation folds
# ---------------------------------------------------------------------------

@dataclass
class FoldSplit:
    fold_index: int
    train_segment_ids: list
    val_segment_ids: list
    class_balance: dict = field(default_factory=dict)
    pd_fraction: float = 0.0

    def to_dict(self):
        return {
            "fold_index": self.fold_index,
            "train_segment_ids": self.train_segment_ids,
            "val_segment_ids": self.val_segment_ids,
            "class_balance": {str(c): v for c, v in self.class_balance.items()},
            "pd_fraction": self.pd_fraction,
        }


def stratified_folds(segments, k=10, unit="segment", seed=0):
    """Stratified k-fold split of the real segments.

    ``unit="subject"`` keeps each subject's segments on one side of every
    split. Synthetic segments only ever join the training sides.
    """
    if unit not in ("segment", "subject"):
        raise ConfigError(f"unit must be 'segment' or 'subject', got {unit!r}")
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    real = [s for s in segments if s.origin == "real"]
    synthetic_ids = [s.segment_id for s in segments if s.origin == "synthetic"]
    labels = np.array([s.label for s in real])
    groups = np.array([s.subject_id for s in real])
    for label in sorted(set(labels.tolist())):
        members = labels == label
        size = int(members.sum()) if unit == "segment" else len(set(groups[members].tolist()))
        if size < k:
            raise SplitError(f"class {label} has {size} {unit}s, fewer than k={k} folds")
    if not len(real):
        raise SplitError("no real segments to split")

    placeholder = np.zeros(len(real))
    if unit == "segment":
        splits = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed).split(placeholder, labels)
    else:
        splits = StratifiedGroupKFold(n_splits=k, shuffle=True, random_state=seed).split(
            placeholder, labels, groups)
    present = sorted(set(labels.tolist()))
    folds = []
    for index, (train_idx, val_idx) in enumerate(splits):
        val_labels = labels[val_idx]
        folds.append(FoldSplit(
            fold_index=index,
            train_segment_ids=[real[i].segment_id for i in train_idx] + synthetic_ids,
            val_segment_ids=[real[i].segment_id for i in val_idx],
            class_balance={c: float(np.mean(val_labels == c)) for c in present},
            pd_fraction=float(np.mean(val_labels != 0)),
        ))
    return folds


# ---------------------------------------------------------------------------
# Synthetic gait surrogates
# ---------------------------------------------------------------------------

SYNTH_STAGES = {0: ("control", 0.0), 1: ("parkinsonian", 2.0), 2: ("parkinsonian", 2.5), 3: ("parkinsonian", 3.0)}


@dataclass(frozen=True)
class SynthSpec:
    n_subjects_per_class: int = 5
    n_timesteps: int = 3000
    noise_std: float = 5.0
    seed: int = 0
    n_classes: int = N_CLASSES
    sample_rate: float = 100.0

    def validate(self):
        if self.n_timesteps < SEGMENT_LEN:
            raise ConfigError(f"n_timesteps must be >= {SEGMENT_LEN}, got {self.n_timesteps}")
        if self.n_subjects_per_class < 1:
            raise ConfigError(f"n_subjects_per_class must be >= 1, got {self.n_subjects_per_class}")
        if not 2 <= self.n_classes <= N_CLASSES:
            raise ConfigError(f"n_classes must be in [2, {N_CLASSES}], got {self.n_classes}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        return self


def synth_dataset(spec):
    """Separable gait surrogates: class c walks with amplitude 200 + 100c N and
    cadence 0.8 + 0.15c Hz; feet are in anti-phase and the last two channels
    are per-foot totals.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.n_timesteps) / spec.sample_rate
    weights = np.linspace(0.6, 1.4, 8)
    records = []
    for label in range(spec.n_classes):
        group, stage = SYNTH_STAGES[label]
        amplitude = 200.0 + 100.0 * label
        frequency = 0.8 + 0.15 * label
        sensors = np.empty((16, spec.n_timesteps))
        for s in range(16):
            foot, position = divmod(s, 8)
            phase = np.pi * foot + np.pi * position / 8
            sensors[s] = amplitude * weights[position] * (1.2 + np.sin(2 * np.pi * frequency * t + phase))
        for i in range(spec.n_subjects_per_class):
            noisy = sensors + rng.normal(0.0, spec.noise_std, size=sensors.shape)
            channels = np.vstack([noisy, noisy[:8].sum(axis=0), noisy[8:].sum(axis=0)])
            subject = f"Sy{'Co' if label == 0 else 'Pt'}{label}{i + 1:02d}"
            records.append(SignalRecord(subject, group, stage, label, channels, f"{subject}_01.txt"))
    return records


def write_physionet(records, out_dir, sample_rate=100.0):
    """Write records as walk files plus a demographics table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for record in records:
        name = Path(record.source_file).name or f"{record.subject_id}_01.txt"
        time = np.arange(record.n_timesteps) / sample_rate
        np.savetxt(out / name, np.column_stack([time, record.channels.T]), fmt="%.4f", delimiter="\t")
        rows[record.subject_id] = {
            "ID": record.subject_id,
            "Group": "CO" if record.group == "control" else "PD",
            "HoehnYahr": record.hy_stage,
        }
    pd.DataFrame(list(rows.values())).to_csv(out / DEMOGRAPHICS_FILE, sep="\t", index=False)
    return out


# ---------------------------------------------------------------------------
# Segment archive
# ---------------------------------------------------------------------------

def write_archive(path, segments, manifest=None):
    """Store segments and their provenance in the versioned binary container."""
    if not segments:
        raise DataFormatError("no segments to archive")
    header = {
        "format": "inceptoformer-segments",
        "version": ARCHIVE_VERSION,
        "counts": {str(c): n for c, n in class_counts(segments).items()},
        "segments": [
            {
                "id": s.segment_id,
                "label": s.label,
                "subject": s.subject_id,
                "origin": s.origin,
                "parents": list(s.synth_parents) if s.synth_parents else None,
            }
            for s in segments
        ],
        "manifest": manifest or {},
    }
    write_container(path, ARCHIVE_MAGIC, header, [("values", np.stack([s.values for s in segments]))])


def read_archive(path):
    header, arrays = read_container(path, ARCHIVE_MAGIC)
    if header.get("version") != ARCHIVE_VERSION:
        raise DataFormatError(f"{path}: unsupported archive version {header.get('version')}")
    values = arrays["values"]
    metas = header["segments"]
    if len(metas) != len(values):
        raise DataFormatError(f"{path}: {len(metas)} segment entries for {len(values)} value blocks")
    segments = [
        Segment(m["id"], v, m["label"], m["subject"], m["origin"],
                tuple(m["parents"]) if m["parents"] else None)
        for m, v in zip(metas, values)
    ]
    return segments, header


def render_histogram(counts, width=40):
    """Text bar chart of per-class counts."""
    peak = max(counts.values()) or 1
    lines = []
    for label, n in sorted(counts.items()):
        bar = "#" * int(round(width * n / peak))
        lines.append(f"  {label} {CLASS_NAMES[label]:<8} {n:>7}  {bar}")
    return "\n".join(lines)
