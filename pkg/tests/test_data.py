import os
import shutil
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from gbm_patch_classifier.data import (
    CLASS_NAMES, HistologyClass, Manifest, NormalizationStats, PatchDataset, PatchRecord,
    class_distribution, class_weights, compute_norm_stats, decode_image, denormalize, encode_ppm,
    kfold_indices, load_manifest, normalize, parse_manifest, preprocess, stratified_split, to_rgb_unit,
    write_class_distribution
)
from gbm_patch_classifier.exceptions import DataError, ImageDecodeError, ManifestError, StratificationError
from gbm_patch_classifier.file_handler import FileHandler
from gbm_patch_classifier.synthetic import write_synthetic_dataset

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def manifest_with_counts(counts) -> Manifest:
    records = []
    for label, count in enumerate(counts):
        records.extend(PatchRecord(f"{CLASS_NAMES[label]}_{i}.ppm", HistologyClass(label)) for i in range(count))
    return Manifest(records)


class TestManifest(unittest.TestCase):

    def test_single_record(self):
        manifest = parse_manifest("path,label\na.ppm,CT\n")
        self.assertEqual(len(manifest), 1)
        self.assertEqual(manifest[0].label, HistologyClass.CT)
        self.assertEqual(manifest.counts[HistologyClass.CT], 1)

    def test_unknown_label_names_line(self):
        with self.assertRaises(ManifestError) as ctx:
            parse_manifest("path,label\na.ppm,XX\n")
        self.assertIn("line 2", str(ctx.exception))
        self.assertEqual(ctx.exception.line, 2)

    def test_fixture_counts(self):
        manifest = load_manifest(os.path.join(FIXTURES, "one_per_class.csv"))
        np.testing.assert_array_equal(manifest.counts, np.ones(6))
        self.assertEqual(manifest.paths[0], "ct/a.ppm")
        self.assertEqual(list(manifest.labels), list(range(6)))

    def test_malformed_rows(self):
        with self.assertRaises(ManifestError) as ctx:
            parse_manifest("path,label\na.ppm,CT\nb.ppm,NC,extra\n")
        self.assertIn("line 3", str(ctx.exception))
        with self.assertRaises(ManifestError) as ctx:
            parse_manifest("file,class\na.ppm,CT\n")
        self.assertIn("line 1", str(ctx.exception))
        with self.assertRaises(ManifestError):
            parse_manifest("path,label\n,CT\n")
        with self.assertRaises(ManifestError):
            parse_manifest("path,label\na.ppm,\n")
        with self.assertRaises(ManifestError):
            parse_manifest("")

    def test_labels_are_case_insensitive_and_blank_lines_skipped(self):
        manifest = parse_manifest("path,label\na.ppm,wm\n\nb.ppm, ic \n")
        self.assertEqual([r.label for r in manifest], [HistologyClass.WM, HistologyClass.IC])

    def test_unlabeled_manifest(self):
        manifest = parse_manifest("path\na.ppm\nb.ppm\n", require_labels=False)
        self.assertEqual(manifest.paths, ["a.ppm", "b.ppm"])
        self.assertFalse(manifest.has_labels)
        with self.assertRaises(DataError):
            manifest.labels
        with self.assertRaises(ManifestError):
            parse_manifest("path\na.ppm\n")

    def test_missing_manifest(self):
        with self.assertRaises(DataError):
            load_manifest(os.path.join(FIXTURES, "does_not_exist.csv"))

    def test_text_roundtrip(self):
        manifest = manifest_with_counts([2, 1, 1, 1, 1, 1])
        self.assertEqual(parse_manifest(manifest.to_text()).records, manifest.records)

    def test_class_distribution(self):
        shares = class_distribution(manifest_with_counts([30, 10, 10, 0, 25, 25]))
        self.assertEqual([s.name for s in shares], list(CLASS_NAMES))
        self.assertEqual([s.count for s in shares], [30, 10, 10, 0, 25, 25])
        self.assertEqual([s.percent for s in shares], [30.0, 10.0, 10.0, 0.0, 25.0, 25.0])

        partly = parse_manifest("path,label\na.ppm,CT\nb.ppm,\nc.ppm,WM\n", require_labels=False)
        self.assertEqual([s.percent for s in class_distribution(partly)], [50.0, 0.0, 0.0, 0.0, 0.0, 50.0])
        with self.assertRaises(DataError):
            class_distribution(parse_manifest("path\na.ppm\n", require_labels=False))

    def test_write_class_distribution(self):
        directory = tempfile.mkdtemp()
        try:
            path = os.path.join(directory, "class_counts.csv")
            write_class_distribution(path, class_distribution(manifest_with_counts([2, 1, 1, 0, 0, 0])))
            rows = FileHandler(path).read_file()
            self.assertEqual(rows[0], ["class", "count", "percent"])
            self.assertEqual(rows[1], ["CT", "2", "50.0"])
            self.assertEqual(rows[6], ["WM", "0", "0.0"])
        finally:
            shutil.rmtree(directory, ignore_errors=True)


class TestPPM(unittest.TestCase):

    def test_decode(self):
        data = b"P6\n# a comment\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6])
        image = decode_image(data)
        self.assertEqual(image.shape, (3, 1, 2))
        self.assertEqual(image.dtype, np.uint8)
        np.testing.assert_array_equal(image[:, 0, 0], [1, 2, 3])
        np.testing.assert_array_equal(image[:, 0, 1], [4, 5, 6])

    def test_encode_decode(self):
        image = np.random.default_rng(0).integers(0, 256, size=(3, 5, 4), dtype=np.uint8)
        np.testing.assert_array_equal(decode_image(encode_ppm(image)), image)

    def test_errors(self):
        with self.assertRaises(ImageDecodeError) as ctx:
            decode_image(b"P3\n1 1\n255\n1 2 3")
        self.assertIn("magic", str(ctx.exception))
        with self.assertRaises(ImageDecodeError) as ctx:
            decode_image(b"P6\n2 2\n255\n" + bytes(5))
        self.assertIn("truncated", str(ctx.exception))
        with self.assertRaises(ImageDecodeError) as ctx:
            decode_image(b"P6\n1 1\n65535\n" + bytes(6))
        self.assertIn("maxval", str(ctx.exception))
        with self.assertRaises(ImageDecodeError):
            decode_image(b"P6\n1")
        with self.assertRaises(ImageDecodeError):
            decode_image(b"P6\n0 1\n255\n")


class TestPreprocessing(unittest.TestCase):

    def test_to_rgb_unit(self):
        image = np.zeros((3, 1, 1), dtype=np.uint8)
        image[0] = 255
        np.testing.assert_allclose(to_rgb_unit(image)[:, 0, 0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(to_rgb_unit(image, assume_bgr=True)[:, 0, 0], [0.0, 0.0, 1.0])
        self.assertEqual(to_rgb_unit(image).dtype, np.float32)
        self.assertEqual(to_rgb_unit(np.stack([image, image])).shape, (2, 3, 1, 1))

    def test_norm_stats_use_population_std(self):
        image = np.zeros((3, 2, 1))
        image[:, 1, 0] = 1.0
        stats = compute_norm_stats([image])
        self.assertEqual(stats.mean, (0.5, 0.5, 0.5))
        self.assertEqual(stats.std, (0.5, 0.5, 0.5))

    def test_norm_stats_errors(self):
        with self.assertRaises(DataError):
            compute_norm_stats([])
        image = np.random.default_rng(0).random((3, 4, 4))
        image[1] = 0.25
        with self.assertRaises(DataError) as ctx:
            compute_norm_stats([image])
        self.assertIn("channel 1", str(ctx.exception))
        with self.assertRaises(ValueError):
            NormalizationStats((0, 0, 0), (1, 0, 1))

    def test_normalize(self):
        images = np.random.default_rng(1).random((5, 3, 4, 4))
        stats = compute_norm_stats([images])
        normalized = normalize(images, stats)
        np.testing.assert_allclose(normalized.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(normalized.std(axis=(0, 2, 3)), 1, atol=1e-12)
        np.testing.assert_allclose(denormalize(normalized, stats), images, atol=1e-12)
        self.assertEqual(normalize(images.astype(np.float32), stats).dtype, np.float32)

    def test_stats_text_roundtrip(self):
        stats = NormalizationStats((0.1, 0.2, 1 / 3), (0.25, 0.5, 2 / 7))
        self.assertEqual(len(stats.to_text().splitlines()), 6)
        self.assertEqual(NormalizationStats.from_text(stats.to_text()), stats)
        with self.assertRaises(DataError):
            NormalizationStats.from_text("1\n2\n")

    def test_preprocess_order(self):
        image = np.random.default_rng(2).integers(0, 256, size=(3, 4, 4), dtype=np.uint8)
        stats = NormalizationStats((0.4, 0.5, 0.6), (0.2, 0.25, 0.3))
        expected = normalize(to_rgb_unit(image, assume_bgr=True), stats)
        np.testing.assert_array_equal(preprocess(encode_ppm(image), stats, assume_bgr=True), expected)


class TestSplitting(unittest.TestCase):

    def test_stratified_split_balanced(self):
        manifest = manifest_with_counts([10] * 6)
        train, val = stratified_split(manifest, 0.8, seed=3)
        self.assertEqual((len(train), len(val)), (48, 12))
        np.testing.assert_array_equal(np.bincount(manifest.labels[train]), [8] * 6)
        np.testing.assert_array_equal(np.bincount(manifest.labels[val]), [2] * 6)
        self.assertEqual(len(np.intersect1d(train, val)), 0)
        np.testing.assert_array_equal(np.union1d(train, val), np.arange(60))
        again_train, again_val = stratified_split(manifest, 0.8, seed=3)
        np.testing.assert_array_equal(train, again_train)
        np.testing.assert_array_equal(val, again_val)

    def test_stratified_split_floor(self):
        manifest = manifest_with_counts([5, 2, 3, 7, 10, 4])
        train, val = stratified_split(manifest, seed=0)
        np.testing.assert_array_equal(np.bincount(manifest.labels[train], minlength=6), [4, 1, 2, 5, 8, 3])
        np.testing.assert_array_equal(np.bincount(manifest.labels[val], minlength=6), [1, 1, 1, 2, 2, 1])

    def test_stratified_split_rejects_singletons(self):
        with self.assertRaises(StratificationError):
            stratified_split(manifest_with_counts([10, 10, 1, 10, 10, 10]))
        with self.assertRaises(StratificationError):
            stratified_split(manifest_with_counts([10, 10, 0, 10, 10, 10]))

    def test_kfold_balanced(self):
        manifest = manifest_with_counts([10] * 6)
        folds = kfold_indices(manifest, k=5, scheme="seeded", seed=1)
        self.assertEqual(len(folds), 5)
        for fold in folds:
            self.assertEqual(len(fold.val), 12)
            np.testing.assert_array_equal(np.bincount(manifest.labels[fold.val]), [2] * 6)
            self.assertEqual(len(np.intersect1d(fold.train, fold.val)), 0)
            np.testing.assert_array_equal(np.union1d(fold.train, fold.val), np.arange(60))
        np.testing.assert_array_equal(np.sort(np.concatenate([f.val for f in folds])), np.arange(60))

    def test_kfold_contiguous(self):
        manifest = manifest_with_counts([10] * 6)
        folds = kfold_indices(manifest, k=5, scheme="contiguous")
        self.assertEqual(list(folds.folds[0].val[:2]), [0, 1])
        self.assertEqual(list(folds.folds[4].val[:2]), [8, 9])
        np.testing.assert_array_equal(folds.fold_of()[:10], [0, 0, 1, 1, 2, 2, 3, 3, 4, 4])

    def test_kfold_is_deterministic(self):
        manifest = manifest_with_counts([7, 6, 5, 9, 5, 8])
        first = kfold_indices(manifest, k=5, scheme="seeded", seed=4)
        second = kfold_indices(manifest, k=5, scheme="seeded", seed=4)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.val, b.val)

    def test_kfold_errors(self):
        with self.assertRaises(StratificationError):
            kfold_indices(manifest_with_counts([10, 10, 4, 10, 10, 10]), k=5)
        with self.assertRaises(ValueError):
            kfold_indices(manifest_with_counts([10] * 6), k=5, scheme="random")

    @settings(max_examples=30, deadline=None)
    @given(
        counts=st.lists(st.integers(min_value=5, max_value=23), min_size=6, max_size=6),
        seed=st.integers(min_value=0, max_value=2 ** 31),
        scheme=st.sampled_from(["seeded", "contiguous"]),
    )
    def test_kfold_partition_property(self, counts, seed, scheme):
        manifest = manifest_with_counts(counts)
        folds = kfold_indices(manifest, k=5, scheme=scheme, seed=seed)
        owner = folds.fold_of()
        self.assertTrue(np.all(owner >= 0))
        np.testing.assert_array_equal(np.sort(np.concatenate([f.val for f in folds])), np.arange(len(manifest)))
        for fold in folds:
            per_class = np.bincount(manifest.labels[fold.val], minlength=6)
            ideal = np.array(counts) / 5
            self.assertTrue(np.all(np.abs(per_class - ideal) < 1))

    def test_class_weights(self):
        np.testing.assert_allclose(class_weights([10] * 6), np.ones(6))
        weights = class_weights([30, 10, 10, 10, 10, 10])
        self.assertAlmostEqual(weights[0], 80 / 180)
        np.testing.assert_allclose(weights[1:], 80 / 60)
        self.assertAlmostEqual(float(np.dot(weights, [30, 10, 10, 10, 10, 10])), 80.0)
        np.testing.assert_allclose(class_weights([60, 20, 20, 20, 20, 20]), weights)
        with self.assertRaises(DataError):
            class_weights([10, 0, 10, 10, 10, 10])


class TestPatchDataset(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.directory = tempfile.mkdtemp()
        cls.manifest_path = write_synthetic_dataset(cls.directory, counts=(3, 2, 2, 2, 2, 2), size=16, seed=0)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.directory, ignore_errors=True)

    def test_load(self):
        manifest = load_manifest(self.manifest_path)
        dataset = PatchDataset.load(manifest, self.directory, workers=3)
        self.assertEqual(dataset.images.shape, (13, 3, 16, 16))
        self.assertEqual(dataset.image_size, (16, 16))
        np.testing.assert_array_equal(dataset.labels, [0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5])
        subset = dataset.subset([0, 12])
        self.assertEqual(len(subset), 2)
        np.testing.assert_array_equal(subset.images[1], dataset.images[12])
        self.assertEqual(dataset.unit_images().dtype, np.float32)

    def test_missing_image(self):
        manifest = parse_manifest("path,label\nmissing.ppm,CT\n")
        with self.assertRaises(DataError) as ctx:
            PatchDataset.load(manifest, self.directory)
        self.assertIn("missing.ppm", str(ctx.exception))

    def test_mixed_sizes(self):
        odd = os.path.join(self.directory, "odd.ppm")
        with open(odd, "wb") as f:
            f.write(encode_ppm(np.zeros((3, 8, 8), dtype=np.uint8)))
        manifest = parse_manifest(f"path,label\n{os.path.basename(odd)},CT\npatch_CT_000.ppm,CT\n")
        with self.assertRaises(DataError):
            PatchDataset.load(manifest, self.directory)


if __name__ == "__main__":
    unittest.main()
