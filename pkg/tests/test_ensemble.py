import math
import os
import shutil
import struct
import tempfile
import unittest

import numpy as np

from gbm_patch_classifier import ensemble as En
from gbm_patch_classifier import model as M
from gbm_patch_classifier.data import (
    HistologyClass, NormalizationStats, PatchDataset, compute_norm_stats, encode_ppm, load_manifest, normalize
)
from gbm_patch_classifier.exceptions import (
    CheckpointError, CheckpointMagicError, CheckpointSchemaError, CheckpointTruncatedError,
    CheckpointVersionError, DataError, ShapeError
)
from gbm_patch_classifier.synthetic import write_synthetic_dataset
from gbm_patch_classifier.train import TrainConfig, Trainer
from gbm_patch_classifier.utils import argmax_lowest

SMALL = M.ArchitectureConfig(input_size=16, base_channels=2, include_stem_maxpool=False)
STATS = NormalizationStats((0.5, 0.4, 0.3), (0.25, 0.2, 1 / 3))


def make_checkpoint(seed=0, architecture=SMALL, **fields):
    params = M.build(architecture, seed)
    rng = np.random.default_rng(seed)
    # non-trivial running statistics so inference differs from a fresh model
    M.forward(params, rng.standard_normal((4, 3, architecture.input_size, architecture.input_size)).astype(np.float32), "training")
    return En.Checkpoint(architecture=architecture, params=params, stats=STATS, seed=seed, **fields)


class TestCheckpointFormat(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.mkdtemp()
        self.checkpoint = make_checkpoint(seed=1, fold=2, epochs_run=7, best_val_loss=0.125, assume_bgr=True)
        self.data = En.encode_checkpoint(self.checkpoint)

    def tearDown(self):
        shutil.rmtree(self.directory, ignore_errors=True)

    def assertSameCheckpoint(self, a, b):
        self.assertEqual(a.architecture, b.architecture)
        self.assertEqual(a.stats, b.stats)
        self.assertEqual(a.metadata(), b.metadata())
        self.assertEqual(list(a.params), list(b.params))
        for name in a.params:
            self.assertEqual(b.params[name].dtype, np.float32)
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_layout(self):
        self.assertEqual(self.data[:4], b"GLPC")
        self.assertEqual(struct.unpack("<I", self.data[4:8])[0], En.FORMAT_VERSION)

    def test_roundtrip(self):
        decoded = En.decode_checkpoint(self.data)
        self.assertSameCheckpoint(self.checkpoint, decoded)
        self.assertEqual(decoded.fold, 2)
        self.assertEqual(decoded.epochs_run, 7)
        self.assertEqual(decoded.best_val_loss, 0.125)
        self.assertTrue(decoded.assume_bgr)
        self.assertEqual(En.encode_checkpoint(decoded), self.data)

    def test_infinite_loss_survives(self):
        decoded = En.decode_checkpoint(En.encode_checkpoint(make_checkpoint()))
        self.assertEqual(decoded.best_val_loss, math.inf)

    def test_save_and_load(self):
        path = os.path.join(self.directory, "model.glpc")
        En.save_checkpoint(path, self.checkpoint)
        self.assertSameCheckpoint(self.checkpoint, En.load_checkpoint(path, expected_config=SMALL))

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            En.load_checkpoint(os.path.join(self.directory, "absent.glpc"))

    def test_bad_magic(self):
        with self.assertRaises(CheckpointMagicError):
            En.decode_checkpoint(b"GLPX" + self.data[4:])
        with self.assertRaises(CheckpointMagicError):
            En.decode_checkpoint(b"\x89PNG")
        path = os.path.join(self.directory, "bad.glpc")
        with open(path, "wb") as f:
            f.write(b"XXXX" + self.data[4:])
        with self.assertRaises(CheckpointMagicError) as ctx:
            En.load_checkpoint(path)
        self.assertIn("bad.glpc", str(ctx.exception))

    def test_unknown_version(self):
        with self.assertRaises(CheckpointVersionError):
            En.decode_checkpoint(self.data[:4] + struct.pack("<I", 2) + self.data[8:])

    def test_truncation(self):
        for cut in (0, 2, 6, 20, len(self.data) // 2, len(self.data) - 1):
            with self.assertRaises(CheckpointTruncatedError, msg=f"cut at {cut}"):
                En.decode_checkpoint(self.data[:cut])

    def test_trailing_bytes(self):
        with self.assertRaises(CheckpointSchemaError):
            En.decode_checkpoint(self.data + b"\x00")

    def test_architecture_mismatch(self):
        other = M.ArchitectureConfig(input_size=16, base_channels=4, include_stem_maxpool=False)
        with self.assertRaises(CheckpointSchemaError):
            En.decode_checkpoint(self.data, expected_config=other)

    def test_missing_metadata(self):
        metadata = "".join(f"{k}={v}\n" for k, v in sorted(self.checkpoint.metadata().items()) if k != "norm.std").encode()
        body_start = 12 + struct.unpack("<I", self.data[8:12])[0]
        data = self.data[:8] + struct.pack("<I", len(metadata)) + metadata + self.data[body_start:]
        with self.assertRaises(CheckpointSchemaError):
            En.decode_checkpoint(data)


class TestEnsembling(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.directory = tempfile.mkdtemp()
        manifest_path = write_synthetic_dataset(cls.directory, counts=(2,) * 6, size=16, seed=3)
        cls.dataset = PatchDataset.load(load_manifest(manifest_path), cls.directory)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.directory, ignore_errors=True)

    def test_probabilities_form_a_simplex(self):
        probs = En.predict_images(make_checkpoint(seed=2), self.dataset.images, batch_size=5)
        self.assertEqual(probs.shape, (12, 6))
        self.assertTrue(np.all(probs >= 0))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)

    def test_predict_single_matches_batch(self):
        checkpoint = make_checkpoint(seed=2)
        single = En.predict_single(checkpoint, encode_ppm(self.dataset.images[4]))
        batch = En.predict_images(checkpoint, self.dataset.images)
        np.testing.assert_allclose(single, batch[4], rtol=1e-5, atol=1e-6)
        with self.assertRaises(ShapeError):
            En.predict_single(checkpoint, encode_ppm(np.zeros((3, 8, 8), dtype=np.uint8)))

    def test_identical_models_match_a_single_model(self):
        checkpoint = make_checkpoint(seed=4)
        single = En.predict_ensemble([checkpoint], self.dataset)
        five = En.predict_ensemble([checkpoint] * 5, self.dataset, workers=3)
        for a, b in zip(single, five):
            np.testing.assert_array_equal(a.probabilities, b.probabilities)
            self.assertEqual(a.label, b.label)

    def test_three_model_mean(self):
        checkpoints = [make_checkpoint(seed=s) for s in (5, 6, 7)]
        predictions = En.predict_ensemble(checkpoints, self.dataset, verbose=True)
        per_model = [En.predict_images(c, self.dataset.images) for c in checkpoints]
        expected = (per_model[0].astype(np.float64) + per_model[1] + per_model[2]) / 3
        for i, prediction in enumerate(predictions):
            np.testing.assert_allclose(prediction.probabilities, expected[i], rtol=1e-12)
            self.assertEqual(prediction.label, HistologyClass(int(np.argmax(expected[i]))))
            self.assertEqual(len(prediction.per_model), 3)
            self.assertEqual(prediction.path, self.dataset.manifest[i].image_path)

    def test_tie_goes_to_lowest_class(self):
        a = np.array([[0.6, 0.4, 0, 0, 0, 0]])
        b = np.array([[0.4, 0.6, 0, 0, 0, 0]])
        mean = En.ensemble_average([a, b])
        np.testing.assert_array_equal(mean, [[0.5, 0.5, 0, 0, 0, 0]])
        self.assertEqual(HistologyClass(int(argmax_lowest(mean)[0])), HistologyClass.CT)
        with self.assertRaises(ValueError):
            En.ensemble_average([])

    def test_mixed_configurations_are_rejected(self):
        other = make_checkpoint(architecture=M.ArchitectureConfig(input_size=16, base_channels=4, include_stem_maxpool=False))
        with self.assertRaises(CheckpointSchemaError):
            En.predict_ensemble([make_checkpoint(), other], self.dataset)
        with self.assertRaises(CheckpointError):
            En.check_compatible([])

    def test_prediction_csv(self):
        predictions = En.predict_ensemble([make_checkpoint(seed=8)], self.dataset)
        path = os.path.join(self.directory, "predictions.csv")
        En.write_predictions(path, predictions, self.dataset.manifest)
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "path,pred_label,prob_CT,prob_PN,prob_MP,prob_NC,prob_IC,prob_WM")
        self.assertEqual(len(lines), len(self.dataset) + 1)

        rows = En.read_predictions(path)
        self.assertEqual([row.path for row in rows], self.dataset.manifest.paths)
        for row, prediction in zip(rows, predictions):
            self.assertEqual(row.label, prediction.label)
            self.assertAlmostEqual(sum(row.probabilities), 1.0, delta=6 * 5e-7 + 1e-6)
            np.testing.assert_allclose(row.probabilities, prediction.probabilities, atol=5e-7)

        with self.assertRaises(DataError):
            En.write_predictions(path, predictions[:-1], self.dataset.manifest)
        with self.assertRaises(DataError):
            En.read_predictions(os.path.join(self.directory, "absent.csv"))


class TestTrainedCheckpoint(unittest.TestCase):

    def test_confident_on_training_patches(self):
        directory = tempfile.mkdtemp()
        try:
            manifest_path = write_synthetic_dataset(directory, counts=(6,) * 6, size=16, seed=0)
            dataset = PatchDataset.load(load_manifest(manifest_path), directory)
            stats = compute_norm_stats([dataset.unit_images()])
            images = normalize(dataset.unit_images(), stats)
            architecture = M.ArchitectureConfig(input_size=16, base_channels=8, include_stem_maxpool=False)
            trainer = Trainer(M.build(architecture, seed=0), TrainConfig(learning_rate=1e-3, batch_size=12))
            rows = np.arange(len(dataset))
            for epoch in range(1, 201):
                trainer.train_epoch(images, dataset.labels, epoch)
                if trainer.predict_proba(images)[rows, dataset.labels].min() > 0.9:
                    break

            checkpoint = En.Checkpoint(architecture=architecture, params=trainer.params, stats=stats)
            path = os.path.join(directory, "model.glpc")
            En.save_checkpoint(path, checkpoint)
            loaded = En.load_checkpoint(path)
            probabilities = En.predict_single(loaded, encode_ppm(dataset.images[7]))
            self.assertGreater(probabilities[dataset.labels[7]], 0.9)
            self.assertAlmostEqual(float(probabilities.sum()), 1.0, delta=1e-5)
        finally:
            shutil.rmtree(directory, ignore_errors=True)


if __name__ == "__main__":
    unittest.main()
