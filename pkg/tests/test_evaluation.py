import math
import os
import shutil
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from gbm_patch_classifier import evaluation as E
from gbm_patch_classifier.data import CLASS_NAMES
from gbm_patch_classifier.exceptions import MetricError
from gbm_patch_classifier.file_handler import FileHandler


def random_labels(n, seed, num_classes=6):
    rng = np.random.default_rng(seed)
    return rng.integers(0, num_classes, size=n), rng.integers(0, num_classes, size=n)


class TestConfusionMatrix(unittest.TestCase):

    def setUp(self):
        self.cm = E.ConfusionMatrix(np.array([[2, 1, 0], [0, 3, 0], [1, 0, 2]]))

    def test_one_vs_rest(self):
        self.assertEqual(E.one_vs_rest(self.cm, 0), E.BinaryCounts(tp=2, fp=1, tn=5, fn=1))
        for k in range(3):
            self.assertEqual(E.one_vs_rest(self.cm, k).total, self.cm.total)
        with self.assertRaises(ValueError):
            E.one_vs_rest(self.cm, 3)

    def test_from_predictions(self):
        cm = E.confusion_from_predictions([0, 0, 1, 5], [0, 1, 1, 5])
        self.assertEqual(cm.counts.shape, (6, 6))
        self.assertEqual(cm.counts[0, 1], 1)
        self.assertEqual(cm.correct, 3)
        self.assertEqual(cm.total, 4)
        with self.assertRaises(ValueError):
            E.confusion_from_predictions([0, 6], [0, 0])
        with self.assertRaises(ValueError):
            E.confusion_from_predictions([0, 1], [0])

    def test_validation(self):
        with self.assertRaises(ValueError):
            E.ConfusionMatrix(np.zeros((2, 3), dtype=int))
        with self.assertRaises(ValueError):
            E.ConfusionMatrix(np.array([[1, -1], [0, 0]]))

    def test_marginals(self):
        np.testing.assert_array_equal(self.cm.true_counts, [3, 3, 3])
        np.testing.assert_array_equal(self.cm.predicted_counts, [3, 4, 2])


class TestBinaryMetrics(unittest.TestCase):

    def test_worked_example(self):
        b = E.BinaryCounts(tp=2, fp=1, tn=3, fn=0)
        self.assertAlmostEqual(E.accuracy(b), 5 / 6)
        self.assertEqual(E.recall(b), 1.0)
        self.assertEqual(E.specificity(b), 0.75)
        self.assertAlmostEqual(E.precision(b), 2 / 3)
        self.assertAlmostEqual(E.f1(b), 0.8)
        self.assertAlmostEqual(E.mcc_binary(b), 6 / math.sqrt(72))

    def test_zero_denominators(self):
        b = E.BinaryCounts(tp=0, fp=0, tn=4, fn=0)
        self.assertEqual(E.recall(b), 0.0)
        self.assertEqual(E.precision(b), 0.0)
        self.assertEqual(E.f1(b), 0.0)
        self.assertEqual(E.mcc_binary(b), 0.0)
        self.assertEqual(E.specificity(b), 1.0)

    def test_empty_counts(self):
        empty = E.BinaryCounts(0, 0, 0, 0)
        for fn in list(E.METRIC_FUNCTIONS.values()) + [E.mcc_binary]:
            with self.assertRaises(MetricError):
                fn(empty)
        with self.assertRaises(MetricError):
            E.build_report(E.ConfusionMatrix(np.zeros((6, 6), dtype=int)))

    def test_mcc_symmetry(self):
        b = E.BinaryCounts(tp=7, fp=2, tn=11, fn=4)
        self.assertAlmostEqual(E.mcc_binary(b.flipped()), -E.mcc_binary(b))
        self.assertEqual(E.mcc_binary(E.BinaryCounts(5, 0, 5, 0)), 1.0)
        self.assertEqual(E.mcc_binary(E.BinaryCounts(0, 5, 0, 5)), -1.0)

    def test_mcc_large_counts(self):
        b = E.BinaryCounts(tp=10 ** 9, fp=3, tn=10 ** 9, fn=5)
        value = E.mcc_binary(b)
        self.assertTrue(math.isfinite(value))
        self.assertAlmostEqual(value, 1.0, places=6)


class TestMulticlass(unittest.TestCase):

    def test_perfect_predictions(self):
        labels = np.repeat(np.arange(6), 3)
        report = E.evaluate_predictions(labels, labels)
        self.assertEqual(report.mcc_multiclass, 1.0)
        self.assertEqual(report.accuracy_multiclass, 1.0)
        for metric in E.METRICS:
            self.assertEqual(report.macro[metric], 1.0)
            self.assertEqual(report.micro[metric], 1.0)

    def test_diagonal_matrices(self):
        for diagonal in ([1, 1, 1, 1, 1, 1], [5, 0, 2, 9, 1, 3]):
            cm = E.ConfusionMatrix(np.diag(diagonal))
            self.assertAlmostEqual(E.mcc_multiclass(cm), 1.0)

    def test_reduces_to_binary(self):
        counts = np.array([[7, 4], [2, 11]])
        cm = E.ConfusionMatrix(counts)
        # class 0 as the positive class: tp=7, fn=4, fp=2, tn=11
        binary = E.BinaryCounts(tp=7, fp=2, tn=11, fn=4)
        self.assertAlmostEqual(E.mcc_multiclass(cm), E.mcc_binary(binary), places=12)

    def test_single_populated_class(self):
        # zero denominator wins over the diagonal case
        cm = E.ConfusionMatrix(np.diag([4, 0, 0, 0, 0, 0]))
        self.assertEqual(E.mcc_multiclass(cm), 0.0)
        self.assertEqual(E.mcc_multiclass(E.ConfusionMatrix(np.diag([4, 1, 0, 0, 0, 0]))), 1.0)

    def test_single_predicted_class(self):
        cm = E.confusion_from_predictions([0, 1, 2, 3], [0, 0, 0, 0])
        self.assertEqual(E.mcc_multiclass(cm), 0.0)

    def test_random_predictions_are_uncorrelated(self):
        true, pred = random_labels(10 ** 4, seed=4)
        self.assertLess(abs(E.mcc_multiclass(E.confusion_from_predictions(true, pred))), 0.05)

    def test_micro_identities(self):
        true, pred = random_labels(500, seed=5)
        cm = E.confusion_from_predictions(true, pred)
        pooled = E.pooled_counts(cm)
        self.assertEqual(pooled.tp, cm.correct)
        self.assertEqual(pooled.fp, cm.total - cm.correct)
        self.assertEqual(pooled.fn, cm.total - cm.correct)
        self.assertEqual(pooled.total, 6 * cm.total)
        micro = E.aggregate(cm, "micro")
        accuracy = cm.correct / cm.total
        self.assertEqual(micro["accuracy"], accuracy)
        self.assertAlmostEqual(micro["recall"], accuracy)
        self.assertAlmostEqual(micro["precision"], accuracy)
        self.assertAlmostEqual(micro["f1"], accuracy)
        pooled_accuracy = E.aggregate(cm, "micro_pooled")["accuracy"]
        self.assertAlmostEqual(pooled_accuracy, (pooled.tp + pooled.tn) / pooled.total)

    def test_macro_is_mean_of_per_class(self):
        true, pred = random_labels(300, seed=6)
        cm = E.confusion_from_predictions(true, pred)
        per_class = E.aggregate(cm, "per_class")
        self.assertEqual(list(per_class), list(CLASS_NAMES))
        macro = E.aggregate(cm, "macro")
        for metric in E.METRICS:
            self.assertAlmostEqual(macro[metric], np.mean([per_class[name][metric] for name in CLASS_NAMES]))
        with self.assertRaises(ValueError):
            E.aggregate(cm, "weighted")

    def test_brute_force_oracle(self):
        true, pred = random_labels(10 ** 4, seed=7)
        report = E.build_report(E.confusion_from_predictions(true, pred))
        for k, name in enumerate(CLASS_NAMES):
            tp = int(np.sum((true == k) & (pred == k)))
            fp = int(np.sum((true != k) & (pred == k)))
            fn = int(np.sum((true == k) & (pred != k)))
            tn = int(np.sum((true != k) & (pred != k)))
            precision = tp / (tp + fp)
            recall = tp / (tp + fn)
            self.assertAlmostEqual(report.per_class[name]["accuracy"], (tp + tn) / len(true), places=12)
            self.assertAlmostEqual(report.per_class[name]["recall"], recall, places=12)
            self.assertAlmostEqual(report.per_class[name]["precision"], precision, places=12)
            self.assertAlmostEqual(report.per_class[name]["specificity"], tn / (tn + fp), places=12)
            self.assertAlmostEqual(report.per_class[name]["f1"], 2 * precision * recall / (precision + recall), places=12)
            expected_mcc = (tp * tn - fp * fn) / math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
            self.assertAlmostEqual(report.mcc_binary_per_class[name], expected_mcc, places=12)
        self.assertAlmostEqual(report.accuracy_multiclass, float(np.mean(true == pred)), places=12)

    @settings(max_examples=40, deadline=None)
    @given(
        counts=st.lists(st.integers(0, 20), min_size=36, max_size=36).filter(lambda c: sum(c) > 0),
        order=st.permutations(range(6)),
    )
    def test_permutation_invariance(self, counts, order):
        cm = E.ConfusionMatrix(np.array(counts).reshape(6, 6))
        permuted = cm.permuted(order)
        self.assertAlmostEqual(E.mcc_multiclass(cm), E.mcc_multiclass(permuted), places=9)
        original = E.aggregate(cm, "macro")
        relabelled = E.aggregate(permuted, "macro")
        for metric in E.METRICS:
            self.assertAlmostEqual(original[metric], relabelled[metric], places=9)
        self.assertEqual(E.aggregate(cm, "micro")["accuracy"], E.aggregate(permuted, "micro")["accuracy"])


class TestReports(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.mkdtemp()
        true, pred = random_labels(120, seed=8)
        self.report = E.evaluate_predictions(true, pred)

    def tearDown(self):
        shutil.rmtree(self.directory, ignore_errors=True)

    def test_rows_and_lookup(self):
        rows = self.report.rows()
        self.assertEqual(rows[0][:2], ("accuracy", "CT"))
        self.assertEqual(self.report.value("recall", "IC"), self.report.per_class["IC"]["recall"])
        self.assertEqual(self.report.value("mcc_multiclass", "multiclass"), self.report.mcc_multiclass)
        self.assertEqual(self.report.value("samples", "all"), 120.0)
        self.assertEqual(self.report.value("accuracy", "micro_multiclass"), self.report.accuracy_multiclass)
        self.assertEqual(self.report.value("recall", "micro"), self.report.micro["recall"])
        self.assertEqual(self.report.value("accuracy", "micro_pooled"), self.report.micro_pooled["accuracy"])
        with self.assertRaises(KeyError):
            self.report.value("accuracy", "micro")
        with self.assertRaises(KeyError):
            self.report.value("recall", "XX")
        table = self.report.render_table()
        self.assertIn("micro_pooled", table)
        self.assertIn("zero denominators evaluate to 0", table)

    def test_write_csv(self):
        path = os.path.join(self.directory, "metrics.csv")
        self.report.write_csv(path)
        rows = FileHandler(path).read_file()
        self.assertEqual(rows[0], ["metric", "scope", "value"])
        self.assertEqual(len(rows) - 1, len(self.report.rows()))
        for (metric, scope, value), row in zip(self.report.rows(), rows[1:]):
            self.assertEqual(row[:2], [metric, scope])
            self.assertEqual(float(row[2]), value)

    def test_summarize(self):
        true, pred = random_labels(120, seed=9)
        other = E.evaluate_predictions(true, pred)
        summary = E.summarize_reports([self.report, other])
        self.assertEqual(len(summary), len(self.report.rows()))
        for metric, scope, mean, low, high in summary:
            a, b = self.report.value(metric, scope), other.value(metric, scope)
            self.assertAlmostEqual(mean, (a + b) / 2)
            self.assertEqual((low, high), (min(a, b), max(a, b)))
        with self.assertRaises(MetricError):
            E.summarize_reports([])

        path = os.path.join(self.directory, "summary.csv")
        E.write_summary(path, summary)
        rows = FileHandler(path).read_file()
        self.assertEqual(rows[0], ["metric", "scope", "mean", "min", "max"])
        self.assertEqual(len(rows), len(summary) + 1)


if __name__ == "__main__":
    unittest.main()
