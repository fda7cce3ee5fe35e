#!/usr/bin/env python3
"""Tests for walk parsing, segmentation, SMOTE, folds, surrogates and archives"""

import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add parent directory to path to import the package
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from inceptoformer.data import (
    DEMOGRAPHICS_FILE,
    OversamplePlan,
    PipelineConfig,
    Segment,
    SignalRecord,
    SynthSpec,
    class_counts,
    load_demographics,
    parse_directory,
    parse_vgrf,
    read_archive,
    render_histogram,
    segment,
    smote,
    stage_to_label,
    stratified_folds,
    synth_dataset,
    write_archive,
    write_physionet,
)
from inceptoformer.errors import (
    ConfigError,
    DataFormatError,
    LabelingError,
    OversamplingError,
    SplitError,
)

DEMOGRAPHICS = "ID\tGroup\tHoehnYahr\nGaPt03\tPD\t2.5\nGaPt07\tPD\t2\nGaCo01\tCO\t\n"


def walk_rows(n_rows, n_columns=19, start=0.0):
    rows = []
    for i in range(n_rows):
        values = [f"{start + i * 0.01:.2f}"] + [f"{10.0 * c + i:.1f}" for c in range(1, n_columns)]
        rows.append("\t".join(values))
    return "\n".join(rows) + "\n"


def make_record(n, label=1, subject="GaPt07"):
    channels = np.arange(18 * n, dtype=np.float64).reshape(18, n)
    return SignalRecord(subject, "parkinsonian", 2.0, label, channels, f"{subject}_01.txt")


def make_segments(sizes, length=5, seed=0, per_subject=2):
    rng = np.random.default_rng(seed)
    segments = []
    for label, size in sizes.items():
        for i in range(size):
            segments.append(Segment(f"c{label}-{i}", rng.normal(size=(length, 18)), label,
                                    f"S{label}-{i // per_subject}"))
    return segments


class TempDirTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name, text):
        path = self.dir / name
        path.write_text(text)
        return path


class TestLabels(unittest.TestCase):
    def test_stage_mapping(self):
        self.assertEqual(stage_to_label("control", 0.0), 0)
        self.assertEqual(stage_to_label("parkinsonian", 2.0), 1)
        self.assertEqual(stage_to_label("parkinsonian", 2.5), 2)
        self.assertEqual(stage_to_label("parkinsonian", 3.0), 3)

    def test_unmapped_stage(self):
        with self.assertRaises(LabelingError):
            stage_to_label("parkinsonian", 4.0)


class TestParse(TempDirTestCase):
    def setUp(self):
        super().setUp()
        self.demographics = self.write(DEMOGRAPHICS_FILE, DEMOGRAPHICS)

    def test_three_row_fixture(self):
        path = self.write("GaPt03_01.txt", walk_rows(3))
        record = parse_vgrf(path, self.demographics)
        self.assertEqual(record.subject_id, "GaPt03")
        self.assertEqual(record.channels.shape, (18, 3))
        self.assertEqual(record.label, 2)
        self.assertEqual(record.hy_stage, 2.5)
        np.testing.assert_array_equal(record.channels[0], [10.0, 11.0, 12.0])
        np.testing.assert_array_equal(record.channels[17], [180.0, 181.0, 182.0])

    def test_control_has_label_zero(self):
        record = parse_vgrf(self.write("GaCo01_02.txt", walk_rows(4)), self.demographics)
        self.assertEqual(record.group, "control")
        self.assertEqual(record.label, 0)

    def test_wrong_column_count_names_expected(self):
        path = self.write("GaPt03_01.txt", walk_rows(3, n_columns=12))
        with self.assertRaises(DataFormatError) as ctx:
            parse_vgrf(path, self.demographics)
        self.assertIn("19", str(ctx.exception))

    def test_missing_subject(self):
        path = self.write("GaPt99_01.txt", walk_rows(3))
        with self.assertRaises(LabelingError):
            parse_vgrf(path, self.demographics)

    def test_non_numeric_rows_are_dropped(self):
        text = walk_rows(2) + "\t".join(["x"] * 19) + "\n" + walk_rows(1, start=0.5)
        path = self.write("GaPt07_01.txt", text)
        with self.assertLogs("inceptoformer.data", level="WARNING") as logs:
            record = parse_vgrf(path, load_demographics(self.demographics))
        self.assertEqual(record.n_timesteps, 3)
        self.assertIn("[PARSE] rejected rows", logs.output[0])

    def test_empty_file(self):
        with self.assertRaises(DataFormatError):
            parse_vgrf(self.write("GaPt07_01.txt", ""), self.demographics)

    def test_demographics_column_aliases(self):
        path = self.write("demo.csv", "Subject,Group,HY\nJuPt01,1,3\nJuCo02,2,\n")
        table = load_demographics(path)
        self.assertEqual(table["JuPt01"], ("parkinsonian", 3.0))
        self.assertEqual(table["JuCo02"], ("control", 0.0))

    def test_unknown_group_code(self):
        with self.assertRaises(LabelingError):
            load_demographics(self.write("demo.txt", "ID\tGroup\tHoehnYahr\nX1\tZZ\t2\n"))

    def test_parse_directory_collects_errors(self):
        self.write("GaPt03_01.txt", walk_rows(5))
        self.write("GaPt99_01.txt", walk_rows(5))
        self.write("notes.txt", "ignored")
        records, errors = parse_directory(self.dir, self.demographics)
        self.assertEqual([r.subject_id for r in records], ["GaPt03"])
        self.assertEqual(len(errors), 1)
        self.assertIn("GaPt99", errors[0])


class TestSegment(unittest.TestCase):
    def test_counts(self):
        self.assertEqual(len(segment(make_record(3000))), 59)
        self.assertEqual(len(segment(make_record(100))), 1)

    def test_short_walk_is_skipped(self):
        with self.assertLogs("inceptoformer.data", level="WARNING"):
            self.assertEqual(segment(make_record(99)), [])

    def test_count_formula_sweep(self):
        full = make_record(5000)
        for n in range(100, 5001):
            record = SignalRecord(full.subject_id, full.group, full.hy_stage, full.label,
                                  full.channels[:, :n], full.source_file)
            segments = segment(record)
            self.assertEqual(len(segments), (n - 100) // 50 + 1, n)
            self.assertLessEqual(int(segments[-1].segment_id.rsplit("@", 1)[1]) + 100, n)

    def test_windows_match_source(self):
        record = make_record(260)
        segments = segment(record)
        for i, s in enumerate(segments):
            self.assertEqual(s.values.shape, (100, 18))
            np.testing.assert_array_equal(s.values, record.channels[:, 50 * i:50 * i + 100].T)
            self.assertEqual(s.label, record.label)
            self.assertEqual(s.subject_id, record.subject_id)
        self.assertEqual(len({s.segment_id for s in segments}), len(segments))

    def test_custom_length_without_overlap(self):
        self.assertEqual(len(segment(make_record(100), length=20, overlap=0.0)), 5)

    def test_bad_overlap(self):
        with self.assertRaises(ConfigError):
            segment(make_record(100), overlap=1.0)

    def test_segment_shape_checked(self):
        with self.assertRaises(DataFormatError):
            Segment("s", np.zeros((100, 17)), 0, "S")


class TestOversamplePlan(unittest.TestCase):
    def test_plan_arithmetic(self):
        plan = OversamplePlan.from_counts({0: 400, 1: 1000, 2: 900, 3: 300})
        self.assertEqual(plan.majority_class, 1)
        self.assertEqual(plan.n_new, {0: 600, 1: 0, 2: 0, 3: 700})
        self.assertEqual(plan.final_counts, {0: 1000, 1: 1000, 2: 900, 3: 1000})

    def test_minority_above_majority_gets_nothing(self):
        plan = OversamplePlan.from_counts({0: 50, 1: 10, 2: 10, 3: 5})
        self.assertEqual(plan.majority_class, 0)
        self.assertEqual(plan.n_new, {0: 0, 1: 0, 2: 0, 3: 45})

    def test_plan_from_segments_ignores_absent_classes(self):
        plan = OversamplePlan.from_segments(make_segments({0: 3, 1: 6}))
        self.assertEqual(plan.class_counts, {0: 3, 1: 6})
        self.assertEqual(plan.n_new, {0: 3, 1: 0})


class TestSmote(unittest.TestCase):
    def setUp(self):
        self.segments = make_segments({0: 6, 1: 10, 3: 4})
        self.plan = OversamplePlan.from_segments(self.segments, k_neighbors=2)
        self.by_id = {s.segment_id: s for s in self.segments}

    def test_counts_reach_majority(self):
        out = smote(self.segments, self.plan, seed=0)
        self.assertEqual(class_counts(out), {0: 10, 1: 10, 2: 0, 3: 10})
        self.assertEqual(class_counts(out, origin="real"), class_counts(self.segments))
        self.assertEqual(out[:len(self.segments)], self.segments)

    def test_synthetic_points_lie_between_parents(self):
        for s in smote(self.segments, self.plan, seed=1)[len(self.segments):]:
            a, b = (self.by_id[p] for p in s.synth_parents)
            self.assertEqual(a.label, s.label)
            self.assertEqual(b.label, s.label)
            self.assertNotEqual(a.segment_id, b.segment_id)
            low, high = np.minimum(a.values, b.values), np.maximum(a.values, b.values)
            self.assertTrue((s.values >= low - 1e-12).all() and (s.values <= high + 1e-12).all())

    def test_lambda_endpoints(self):
        for lam, parent in ((0.0, 0), (1.0, 1)):
            out = smote(self.segments, self.plan, seed=2, lam_range=(lam, lam))
            for s in out[len(self.segments):]:
                np.testing.assert_allclose(s.values, self.by_id[s.synth_parents[parent]].values)

    def test_seeded_runs_are_identical(self):
        first = smote(self.segments, self.plan, seed=3)
        second = smote(self.segments, self.plan, seed=3)
        for a, b in zip(first, second):
            self.assertEqual(a.segment_id, b.segment_id)
            np.testing.assert_array_equal(a.values, b.values)

    def test_nothing_to_do(self):
        balanced = make_segments({0: 4, 1: 4})
        out = smote(balanced, OversamplePlan.from_segments(balanced), seed=0)
        self.assertEqual(out, balanced)

    def test_k_must_be_below_class_size(self):
        plan = OversamplePlan.from_segments(self.segments, k_neighbors=4)
        with self.assertRaises(ConfigError):
            smote(self.segments, plan, seed=0)

    def test_singleton_minority(self):
        segments = make_segments({0: 1, 1: 5})
        with self.assertRaises(OversamplingError):
            smote(segments, OversamplePlan.from_segments(segments, k_neighbors=1), seed=0)

    def test_random_fixtures(self):
        for fixture in range(100):
            rng = np.random.default_rng(fixture)
            sizes = {c: int(rng.integers(3, 16)) for c in range(4) if c == 1 or rng.random() > 0.2}
            segments = make_segments(sizes, length=4, seed=fixture)
            plan = OversamplePlan.from_segments(segments, k_neighbors=2)
            majority = max(sizes.values())
            self.assertEqual(sizes[plan.majority_class], majority, fixture)
            for c, n in sizes.items():
                expected = majority - n if c in (0, 3) else 0
                self.assertEqual(plan.n_new[c], expected, (fixture, c))

            out = smote(segments, plan, seed=fixture)
            counts = class_counts(out)
            for c in range(4):
                self.assertEqual(counts[c], plan.final_counts.get(c, 0), (fixture, c))
            self.assertEqual(class_counts(out, origin="real"), class_counts(segments))
            by_id = {s.segment_id: s for s in segments}
            for s in out[len(segments):]:
                a, b = (by_id[p] for p in s.synth_parents)
                self.assertEqual({a.label, b.label}, {s.label})
                self.assertNotEqual(a.segment_id, b.segment_id)
                low, high = np.minimum(a.values, b.values), np.maximum(a.values, b.values)
                self.assertTrue((s.values >= low - 1e-12).all() and (s.values <= high + 1e-12).all(), fixture)


class TestFolds(unittest.TestCase):
    def setUp(self):
        self.real = make_segments({0: 10, 1: 10, 2: 10, 3: 10})
        self.synthetic = [
            Segment("synth-c0-000000", np.zeros((5, 18)), 0, "S0-0", "synthetic", ("c0-0", "c0-1"))
        ]

    def test_partition_and_balance(self):
        folds = stratified_folds(self.real + self.synthetic, k=5, seed=0)
        self.assertEqual(len(folds), 5)
        seen = []
        for fold in folds:
            self.assertFalse(set(fold.train_segment_ids) & set(fold.val_segment_ids))
            self.assertIn("synth-c0-000000", fold.train_segment_ids)
            self.assertNotIn("synth-c0-000000", fold.val_segment_ids)
            self.assertEqual(fold.class_balance, {0: 0.25, 1: 0.25, 2: 0.25, 3: 0.25})
            self.assertAlmostEqual(fold.pd_fraction, 0.75)
            seen.extend(fold.val_segment_ids)
        self.assertEqual(sorted(seen), sorted(s.segment_id for s in self.real))

    def test_subject_unit_keeps_subjects_together(self):
        subjects = {s.segment_id: s.subject_id for s in self.real}
        for fold in stratified_folds(self.real, k=5, unit="subject", seed=0):
            train = {subjects[i] for i in fold.train_segment_ids}
            val = {subjects[i] for i in fold.val_segment_ids}
            self.assertFalse(train & val)

    def test_same_seed_same_folds(self):
        first = [f.to_dict() for f in stratified_folds(self.real, k=5, seed=4)]
        second = [f.to_dict() for f in stratified_folds(self.real, k=5, seed=4)]
        self.assertEqual(first, second)

    def test_class_smaller_than_k(self):
        with self.assertRaises(SplitError):
            stratified_folds(make_segments({0: 3, 1: 10}), k=5)

    def test_bad_unit(self):
        with self.assertRaises(ConfigError):
            stratified_folds(self.real, unit="walk")


class TestSynth(TempDirTestCase):
    def test_noise_free_subjects_are_identical(self):
        records = synth_dataset(SynthSpec(n_subjects_per_class=2, n_timesteps=200, noise_std=0.0))
        self.assertEqual(len(records), 8)
        by_label = {}
        for r in records:
            by_label.setdefault(r.label, []).append(r)
        for label, group in by_label.items():
            np.testing.assert_array_equal(group[0].channels, group[1].channels)
        self.assertFalse(np.array_equal(by_label[0][0].channels, by_label[3][0].channels))

    def test_totals_are_foot_sums(self):
        record = synth_dataset(SynthSpec(n_subjects_per_class=1, n_timesteps=150))[2]
        np.testing.assert_allclose(record.channels[16], record.channels[:8].sum(axis=0))
        np.testing.assert_allclose(record.channels[17], record.channels[8:16].sum(axis=0))
        self.assertEqual(record.subject_id, "SyPt201")
        self.assertEqual(record.hy_stage, 2.5)

    def test_walk_shorter_than_a_segment(self):
        with self.assertRaises(ConfigError):
            synth_dataset(SynthSpec(n_timesteps=99))

    def test_physionet_round_trip(self):
        records = synth_dataset(SynthSpec(n_subjects_per_class=1, n_timesteps=120, n_classes=3))
        write_physionet(records, self.dir)
        parsed, errors = parse_directory(self.dir, self.dir / DEMOGRAPHICS_FILE)
        self.assertEqual(errors, [])
        self.assertEqual(sorted(r.subject_id for r in parsed), sorted(r.subject_id for r in records))
        originals = {r.subject_id: r for r in records}
        for r in parsed:
            self.assertEqual(r.label, originals[r.subject_id].label)
            np.testing.assert_allclose(r.channels, originals[r.subject_id].channels, atol=1e-4)


class TestArchive(TempDirTestCase):
    def test_round_trip(self):
        segments = make_segments({0: 2, 1: 3}, length=100)
        segments.append(Segment("synth-c0-000000", segments[0].values, 0, "S0-0", "synthetic",
                                ("c0-0", "c0-1")))
        path = self.dir / "segments.ifseg"
        write_archive(path, segments, manifest={"seed": 7})
        restored, header = read_archive(path)
        self.assertEqual(header["manifest"], {"seed": 7})
        self.assertEqual(header["counts"], {"0": 3, "1": 3, "2": 0, "3": 0})
        for a, b in zip(segments, restored):
            self.assertEqual((a.segment_id, a.label, a.subject_id, a.origin, a.synth_parents),
                             (b.segment_id, b.label, b.subject_id, b.origin, b.synth_parents))
            np.testing.assert_array_equal(a.values, b.values)

    def test_bad_magic(self):
        path = self.write("segments.ifseg", "IFCKPT01 not an archive")
        with self.assertRaises(DataFormatError):
            read_archive(path)

    def test_empty_archive_refused(self):
        with self.assertRaises(DataFormatError):
            write_archive(self.dir / "empty.ifseg", [])


class TestPipelineConfig(unittest.TestCase):
    def test_defaults(self):
        config = PipelineConfig().validate()
        self.assertEqual((config.segment_len, config.overlap, config.k_folds), (100, 0.5, 10))

    def test_invalid_values(self):
        for bad in ({"overlap": 1.0}, {"k_folds": 1}, {"unit": "walk"}, {"smote_mode": "always"},
                    {"average": "micro"}):
            with self.assertRaises(ConfigError):
                PipelineConfig(**bad).validate()

    def test_unknown_field(self):
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict({"folds": 3})


class TestHistogram(unittest.TestCase):
    def test_bars_scale_to_peak(self):
        text = render_histogram({0: 10, 1: 20, 2: 0, 3: 5}, width=20)
        lines = text.splitlines()
        self.assertEqual(len(lines), 4)
        self.assertTrue(lines[1].endswith("#" * 20))
        self.assertTrue(lines[0].endswith("#" * 10))
        self.assertIn("Healthy", lines[0])


if __name__ == "__main__":
    unittest.main()
