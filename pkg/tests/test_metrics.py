import numpy as np
import pytest

from emodist.errors import DataError
from emodist.metrics import (
    MetricsReport,
    average_precision,
    compute_report,
    confusion_matrix,
    macro_f1,
    minority_map,
)
from reference_impl import (
    ref_accuracy,
    ref_average_precision,
    ref_confusion,
    ref_macro_f1,
    ref_minority_map,
)


def constant_predictor_fixture(n_per_class=400, predicted=0):
    gold = [c for c in range(8) for _ in range(n_per_class)]
    pred = [predicted] * len(gold)
    return gold, pred


class TestMacroF1:
    def test_perfect(self, rng):
        gold = list(rng.integers(0, 8, size=100))
        value, breakdown = macro_f1(gold, gold)
        assert value == pytest.approx(1.0)

    def test_constant_predictor_closed_form(self):
        gold, pred = constant_predictor_fixture()
        value, _ = macro_f1(gold, pred)
        assert value == pytest.approx((1 / 8) * (2 * 0.125 / 1.125), abs=1e-12)
        assert value == pytest.approx(0.0277777777, abs=1e-6)

    def test_matches_brute_force(self, rng):
        for trial in range(20):
            gold = [int(g) for g in rng.integers(0, 8, size=200)]
            pred = [int(p) for p in rng.integers(0, 8, size=200)]
            value, _ = macro_f1(gold, pred)
            assert value == pytest.approx(ref_macro_f1(gold, pred), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DataError, match="mismatch"):
            macro_f1([0, 1], [0])

    def test_out_of_range_class(self):
        with pytest.raises(DataError, match="8 scored"):
            macro_f1([0, 8], [0, 0])

    def test_joint_permutation_invariance(self, rng):
        gold = [int(g) for g in rng.integers(0, 8, size=120)]
        pred = [int(p) for p in rng.integers(0, 8, size=120)]
        base, _ = macro_f1(gold, pred)
        perm = rng.permutation(120)
        shuffled, _ = macro_f1([gold[i] for i in perm], [pred[i] for i in perm])
        assert shuffled == pytest.approx(base, abs=1e-15)


class TestConfusion:
    def test_row_sums_are_gold_counts(self, rng):
        gold = [int(g) for g in rng.integers(0, 8, size=150)]
        pred = [int(p) for p in rng.integers(0, 8, size=150)]
        matrix = confusion_matrix(gold, pred)
        assert np.array_equal(matrix, np.asarray(ref_confusion(gold, pred)))
        for c in range(8):
            assert matrix[c].sum() == gold.count(c)


class TestAveragePrecision:
    def test_perfect_ranking(self):
        scores = [0.9, 0.8, 0.7, 0.2, 0.1]
        positives = [True, True, True, False, False]
        assert average_precision(scores, positives) == pytest.approx(1.0)

    def test_single_positive_at_rank_r(self):
        n = 10
        for r in range(1, n + 1):
            scores = [float(n - i) for i in range(n)]
            positives = [i == r - 1 for i in range(n)]
            assert average_precision(scores, positives) == pytest.approx(1.0 / r)

    def test_matches_brute_force(self, rng):
        for trial in range(30):
            scores = [float(s) for s in rng.random(50)]
            positives = [bool(b) for b in rng.random(50) < 0.3]
            got = average_precision(scores, positives)
            want = ref_average_precision(scores, positives)
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-12)

    def test_no_positives_absent(self):
        assert average_precision([0.3, 0.2], [False, False]) is None

    def test_tie_break_by_index(self):
        # equal scores: earlier index ranks first
        assert average_precision([0.5, 0.5], [True, False]) == pytest.approx(1.0)
        assert average_precision([0.5, 0.5], [False, True]) == pytest.approx(0.5)

    def test_monotone_transform_invariance(self, rng):
        scores = [float(s) for s in rng.random(40)]
        positives = [bool(b) for b in rng.random(40) < 0.4]
        base = average_precision(scores, positives)
        squashed = average_precision([np.tanh(3 * s) for s in scores], positives)
        assert squashed == pytest.approx(base, abs=1e-12)


class TestMinorityMap:
    def test_oracle_predictor(self, rng):
        gold = [int(g) for g in rng.integers(0, 8, size=60)]
        probs = np.zeros((60, 9))
        for i, g in enumerate(gold):
            probs[i, g] = 1.0
        assert minority_map(gold, probs) == pytest.approx(1.0)

    def test_class_without_positives_skipped(self, rng):
        gold = [4, 5, 7, 0, 1] * 6  # no fear (6) samples
        probs = rng.random((len(gold), 9))
        got = minority_map(gold, probs)
        want = ref_minority_map(gold, probs.tolist(), minority_classes=(4, 5, 7))
        assert got == pytest.approx(want, abs=1e-12)

    def test_matches_brute_force(self, rng):
        for trial in range(20):
            gold = [int(g) for g in rng.integers(0, 8, size=100)]
            probs = rng.random((100, 9))
            assert minority_map(gold, probs) == pytest.approx(
                ref_minority_map(gold, probs.tolist()), abs=1e-12)

    def test_depends_only_on_minority_columns(self, rng):
        gold = [int(g) for g in rng.integers(0, 8, size=80)]
        probs = rng.random((80, 9))
        perturbed = probs.copy()
        perturbed[:, [0, 1, 2, 3, 8]] = rng.random((80, 5))
        assert minority_map(gold, probs) == minority_map(gold, perturbed)


class TestComputeReport:
    def test_accuracy_and_fields(self, rng):
        gold = [int(g) for g in rng.integers(0, 8, size=90)]
        probs = rng.random((90, 9))
        report = compute_report(gold, probs)
        pred = [int(np.argmax(row[:8])) for row in probs]
        assert report.accuracy == pytest.approx(ref_accuracy(gold, pred), abs=1e-12)
        assert report.macro_f1 == pytest.approx(ref_macro_f1(gold, pred), abs=1e-12)
        assert report.n_scored == 90
        assert report.confusion.sum() == 90

    def test_other_never_predicted(self):
        probs = np.zeros((4, 9))
        probs[:, 8] = 0.9  # mass on "other"
        probs[:, 3] = 0.1
        report = compute_report([3, 3, 3, 3], probs)
        assert report.accuracy == pytest.approx(100.0)

    def test_report_json_round_trip(self, tmp_path, rng):
        gold = [int(g) for g in rng.integers(0, 8, size=40)]
        probs = rng.random((40, 9))
        report = compute_report(gold, probs)
        path = tmp_path / "report.json"
        report.write_json(path)
        back = MetricsReport.from_dict(__import__("json").loads(path.read_text()))
        assert back.macro_f1 == report.macro_f1
        assert np.array_equal(back.confusion, report.confusion)

    def test_confusion_csv(self, tmp_path):
        gold, pred = [0, 1, 2], [0, 1, 3]
        probs = np.zeros((3, 9))
        for i, p in enumerate(pred):
            probs[i, p] = 1.0
        report = compute_report(gold, probs)
        path = tmp_path / "confusion.csv"
        report.write_confusion_csv(path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 9
        assert lines[0].startswith("gold\\pred,neutral,happy")
