import heapq
import itertools
import json

import numpy as np
import pytest

from renodet.errors import DataError
from renodet.eval import (
    KidneyRecord,
    RocCurve,
    dice,
    fold_record_indices,
    fold_sum,
    kidney_score,
    make_folds,
    roc_auc,
    save_roc_csv,
    save_summary_json,
    stratify,
)
from renodet.volio import LabelGrid


def top10_oracle(values):
    """Independent vote oracle: descending sort, left-to-right accumulation."""
    total = 0.0
    for v in heapq.nlargest(10, [float(x) for x in values]):
        total += v
    return total


def pairwise_auc_oracle(labels, scores):
    """Brute-force Mann-Whitney with half credit for ties."""
    pos = [s for lab, s in zip(labels, scores) if lab]
    neg = [s for lab, s in zip(labels, scores) if not lab]
    credits = 0
    for p in pos:
        for n in neg:
            if p > n:
                credits += 2
            elif p == n:
                credits += 1
    return credits / (2 * len(pos) * len(neg))


def record(kidney_id, truth, score, diameter=0.0, patient=None):
    return KidneyRecord(kidney_id=kidney_id, patient_id=patient or kidney_id,
                        truth=truth, tumour_max_diameter=diameter,
                        score=score)


class TestKidneyScore:
    def test_twelve_tile_example(self):
        probs = [0.9, 0.9] + [0.1] * 10
        got = kidney_score(probs, "tile2d")
        assert got == top10_oracle(probs)
        assert got == pytest.approx(2.6, abs=1e-12)

    def test_block_top1(self):
        assert kidney_score([0.2, 0.7, 0.4], "block3d") == 0.7

    def test_fewer_than_ten_sums_all(self):
        probs = [0.3, 0.1, 0.2, 0.5, 0.4]
        assert kidney_score(probs, "tile2d") == top10_oracle(probs)

    def test_matches_oracle_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 30))
            probs = rng.random(n)
            assert kidney_score(probs, "tile2d") == top10_oracle(probs)
            assert kidney_score(probs, "block3d") == probs.max()

    def test_monotone_in_any_probability(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            probs = rng.random(15)
            base = kidney_score(probs, "tile2d")
            i = int(rng.integers(0, 15))
            bumped = probs.copy()
            bumped[i] = min(1.0, bumped[i] + rng.random())
            assert kidney_score(bumped, "tile2d") >= base

    def test_empty_rejected(self):
        with pytest.raises(DataError, match="no samples"):
            kidney_score([], "tile2d")

    def test_unknown_kind(self):
        with pytest.raises(DataError, match="kind"):
            kidney_score([0.5], "slab")


class TestFoldSum:
    def test_basics(self):
        assert fold_sum([0.2] * 5) == pytest.approx(1.0, abs=1e-12)
        assert fold_sum([1, 2, 3, 4, 5]) == 15.0

    def test_order_independent_bitwise(self):
        scores = [0.1, 0.3, 1 / 3, 0.7, 1 / 7]
        results = {fold_sum(list(p)) for p in itertools.permutations(scores)}
        assert len(results) == 1

    def test_equals_five_times_mean(self):
        scores = [0.11, 0.42, 0.98, 0.03, 0.61]
        assert fold_sum(scores) == pytest.approx(5 * np.mean(scores),
                                                 abs=1e-12)

    def test_wrong_count(self):
        with pytest.raises(DataError, match="fold"):
            fold_sum([0.5] * 4)


class TestRocAuc:
    def test_perfect_separation(self):
        records = [record(f"p{i}", "cancerous", 1.0 + i) for i in range(5)] \
            + [record(f"n{i}", "healthy", -float(i)) for i in range(5)]
        assert roc_auc(records).auc == 1.0

    def test_all_ties(self):
        records = [record("p", "cancerous", 0.5),
                   record("n", "healthy", 0.5),
                   record("n2", "healthy", 0.5)]
        assert roc_auc(records).auc == 0.5

    def test_equals_pairwise_oracle_exactly(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = int(rng.integers(10, 200))
            labels = rng.random(n) < 0.4
            if not labels.any() or labels.all():
                continue
            # quantized scores force plenty of ties
            scores = np.round(rng.random(n), 2)
            records = [record(f"k{i}", "cancerous" if lab else "healthy",
                              s) for i, (lab, s) in
                       enumerate(zip(labels, scores))]
            assert roc_auc(records).auc == \
                pairwise_auc_oracle(labels, scores)

    def test_curve_shape_and_endpoints(self):
        rng = np.random.default_rng(3)
        records = [record(f"k{i}", "cancerous" if i % 3 == 0 else "healthy",
                          float(rng.random())) for i in range(30)]
        curve = roc_auc(records)
        assert curve.thresholds[0] == np.inf
        assert curve.sensitivities[0] == 0.0 and curve.specificities[0] == 1.0
        assert curve.sensitivities[-1] == 1.0 and curve.specificities[-1] == 0.0
        assert np.all(np.diff(curve.thresholds) < 0)
        assert np.all(np.diff(curve.sensitivities) >= 0)
        assert np.all(np.diff(curve.specificities) <= 0)
        assert np.all((curve.sensitivities >= 0)
                      & (curve.sensitivities <= 1))
        assert np.all((curve.specificities >= 0)
                      & (curve.specificities <= 1))

    def test_trapezoid_area_matches_auc(self):
        rng = np.random.default_rng(4)
        scores = np.round(rng.random(60), 1)
        labels = rng.random(60) < 0.5
        labels[0], labels[1] = True, False
        records = [record(f"k{i}", "cancerous" if lab else "healthy", s)
                   for i, (lab, s) in enumerate(zip(labels, scores))]
        curve = roc_auc(records)
        fpr = 1.0 - curve.specificities
        area = np.trapezoid(curve.sensitivities, fpr)
        assert area == pytest.approx(curve.auc, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(DataError, match="both"):
            roc_auc([record("a", "healthy", 0.1),
                     record("b", "healthy", 0.2)])


class TestStratify:
    def test_cutoff_inclusive_and_healthy_in_both(self):
        records = [record("s", "cancerous", 0.9, diameter=40.0),
                   record("l", "cancerous", 0.8, diameter=40.5),
                   record("h1", "healthy", 0.1),
                   record("h2", "healthy", 0.2)]
        strata = stratify(records)
        small_ids = {r.kidney_id for r in strata["small"]}
        large_ids = {r.kidney_id for r in strata["large"]}
        assert small_ids == {"s", "h1", "h2"}
        assert large_ids == {"l", "h1", "h2"}

    def test_cancerous_partition(self):
        rng = np.random.default_rng(5)
        records = [record(f"k{i}", "cancerous", 0.5,
                          diameter=float(rng.uniform(5, 80)))
                   for i in range(30)]
        strata = stratify(records)
        small = {r.kidney_id for r in strata["small"]}
        large = {r.kidney_id for r in strata["large"]}
        assert small.isdisjoint(large)
        assert small | large == {f"k{i}" for i in range(30)}


class TestDice:
    def test_identical_full_disjoint(self):
        a = np.zeros((6, 6, 6), bool)
        a[1:4] = True
        assert dice(a, a) == 1.0
        b = np.zeros((6, 6, 6), bool)
        b[4:6] = True
        assert dice(a, b) == 0.0

    def test_half_overlap_two_thirds(self):
        # equal volumes, intersection covering half the union
        a = np.zeros((8, 4, 4), bool)
        b = np.zeros((8, 4, 4), bool)
        a[0:6] = True
        b[2:8] = True
        assert dice(a, b) == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_empty_empty_is_one(self):
        empty = np.zeros((3, 3, 3), bool)
        assert dice(empty, empty) == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(6)
        a = rng.random((5, 5, 5)) < 0.3
        b = rng.random((5, 5, 5)) < 0.3
        assert dice(a, b) == dice(b, a)

    def test_geometry_mismatch(self):
        with pytest.raises(DataError, match="geometr"):
            dice(np.zeros((3, 3, 3), bool), np.zeros((3, 3, 4), bool))

    def test_accepts_label_grids(self):
        labels = np.zeros((5, 5, 5), np.uint8)
        labels[2, 2, 2] = 2
        grid = LabelGrid(labels=labels, spacing=1.0, origin=(0, 0, 0))
        assert dice(grid, labels > 0) == 1.0


class TestMakeFolds:
    def test_ten_patients_folds_of_two(self):
        folds = make_folds([f"p{i}" for i in range(10)], k=5, seed=0)
        assert [len(f) for f in folds] == [2] * 5

    def test_sizes_within_one(self):
        folds = make_folds([f"p{i}" for i in range(23)], k=5, seed=1)
        sizes = sorted(len(f) for f in folds)
        assert sizes == [4, 4, 5, 5, 5]

    def test_partition(self):
        ids = [f"p{i}" for i in range(17)]
        folds = make_folds(ids, seed=2)
        seen = [p for f in folds for p in f]
        assert sorted(seen) == sorted(ids)

    def test_duplicates_collapse(self):
        folds = make_folds(["a", "a", "b", "c", "d", "e"], k=5, seed=0)
        assert sum(len(f) for f in folds) == 5

    def test_deterministic(self):
        ids = [f"p{i}" for i in range(12)]
        assert make_folds(ids, seed=7) == make_folds(ids, seed=7)

    def test_too_few_patients(self):
        with pytest.raises(DataError, match="folds"):
            make_folds(["a", "b", "c"], k=5)

    def test_both_kidneys_share_fold(self):
        patients = [f"p{i}" for i in range(10)]
        folds = make_folds(patients, seed=3)
        # two records per patient, like a left and a right kidney
        per_record = [p for p in patients for _ in range(2)]
        indices = fold_record_indices(per_record, folds)
        for fold in indices:
            fold_patients = {per_record[i] for i in fold}
            assert len(fold) == 2 * len(fold_patients)

    def test_record_mapping_errors(self):
        with pytest.raises(DataError, match="two folds"):
            fold_record_indices(["a"], [["a"], ["a"]])
        with pytest.raises(DataError, match="missing"):
            fold_record_indices(["z"], [["a"], ["b"]])


class TestExport:
    def test_roc_csv(self, tmp_path):
        curve = RocCurve(thresholds=np.array([np.inf, 0.5]),
                         sensitivities=np.array([0.0, 1.0]),
                         specificities=np.array([1.0, 0.0]), auc=1.0)
        path = tmp_path / "roc.csv"
        save_roc_csv(curve, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "threshold,sensitivity,specificity"
        assert len(lines) == 3
        assert float(lines[2].split(",")[1]) == 1.0

    def test_summary_json(self, tmp_path):
        path = tmp_path / "summary.json"
        save_summary_json({"b": 1, "a": {"auc": 0.9}}, path)
        text = path.read_text()
        assert text.endswith("\n")
        back = json.loads(text)
        assert back == {"b": 1, "a": {"auc": 0.9}}
        assert text.index('"a"') < text.index('"b"')
