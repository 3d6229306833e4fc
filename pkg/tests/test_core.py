import json
import tempfile
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase, override_settings
from faker import Faker

import django_ood_calibration as oodcal
from django_ood_calibration._cache import _get_kind_hash, cached_arrays, get_cache_key
from django_ood_calibration.misc import get_OODCAL_CACHE

faker = Faker()


def random_logits(rng, classes=4, size=8):
    return rng.normal(0, 3, (classes, size, size))


class SoftmaxTests(SimpleTestCase):
    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for classes in (1, 2, 4):
            with self.subTest(classes=classes):
                p = oodcal.softmax(oodcal.LogitMap(random_logits(rng, classes)))
                self.assertIsInstance(p, oodcal.ProbabilityMap)
                np.testing.assert_allclose(p.data.sum(axis=0), 1.0, atol=1e-12)

    def test_large_logits_stay_finite(self):
        logits = np.zeros((2, 2, 2))
        logits[0] = 1e4
        p = oodcal.softmax(logits)
        self.assertTrue(np.all(np.isfinite(p)))
        np.testing.assert_array_equal(p[0], 1.0)

    def test_two_class_value(self):
        logits = np.zeros((2, 1, 1))
        logits[0] = 2.0
        p = oodcal.softmax(logits)
        e2 = Decimal(2).exp()
        expected = float(e2 / (e2 + 1))
        self.assertAlmostEqual(float(p[0, 0, 0]), expected, places=12)
        self.assertAlmostEqual(float(p[1, 0, 0]), 1 - expected, places=12)

    def test_equal_logits_are_uniform(self):
        for classes, value in ((2, 0.0), (3, faker.pyfloat(min_value=-50, max_value=50))):
            with self.subTest(classes=classes, value=value):
                p = oodcal.softmax(np.full((classes, 2, 2), value))
                np.testing.assert_allclose(p, 1.0 / classes, atol=1e-12)

    def test_non_finite(self):
        logits = np.zeros((2, 2, 2))
        logits[0, 0, 0] = np.nan
        with self.assertRaises(oodcal.NonFiniteError):
            oodcal.softmax(logits)
        with self.assertRaises(oodcal.NonFiniteError):
            oodcal.LogitMap(logits)
        with self.assertRaises(oodcal.NonFiniteError):
            oodcal.softmax(torch.tensor(logits))

    def test_torch_matches_numpy(self):
        logits = random_logits(np.random.default_rng(1))
        np.testing.assert_allclose(
            oodcal.softmax(torch.tensor(logits)).numpy(), oodcal.softmax(logits), atol=1e-12
        )


class TemperatureScaleTests(SimpleTestCase):
    def test_unit_temperature_is_identity(self):
        z = oodcal.LogitMap(random_logits(np.random.default_rng(2)))
        scaled = oodcal.temperature_scale(z, oodcal.TemperatureMap(np.ones((1, 8, 8))))
        np.testing.assert_array_equal(scaled.data, oodcal.softmax(z).data)

    def test_argmax_preserved(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            z = oodcal.LogitMap(random_logits(rng))
            t = oodcal.TemperatureMap(rng.uniform(1e-3, 50, (1, 8, 8)))
            np.testing.assert_array_equal(
                oodcal.temperature_scale(z, t).prediction, oodcal.softmax(z).prediction
            )

    def test_sharpen_and_soften(self):
        z = oodcal.LogitMap(np.array([[[2.0]], [[0.0]]]))
        base = oodcal.softmax(z).confidence[0, 0]
        sharp = oodcal.temperature_scale(z, oodcal.TemperatureMap(np.full((1, 1, 1), 0.5)))
        soft = oodcal.temperature_scale(z, oodcal.TemperatureMap(np.full((1, 1, 1), 2.0)))
        self.assertGreater(sharp.confidence[0, 0], base)
        self.assertLess(soft.confidence[0, 0], base)

    def test_shape_mismatch(self):
        z = oodcal.LogitMap(np.zeros((2, 4, 4)))
        with self.assertRaises(oodcal.ShapeMismatch):
            oodcal.temperature_scale(z, oodcal.TemperatureMap(np.ones((1, 4, 5))))


class DomainTypeTests(SimpleTestCase):
    def test_image_slice(self):
        with self.assertRaises(oodcal.ShapeMismatch):
            oodcal.ImageSlice(np.zeros((2, 4, 4)))
        with self.assertRaises(oodcal.NonFiniteError):
            oodcal.ImageSlice(np.full((1, 4, 4), np.inf))
        x = oodcal.ImageSlice(np.zeros((1, 4, 6)), "case0001", 2)
        self.assertEqual(x.shape, (4, 6))
        self.assertFalse(x.data.flags.writeable)
        self.assertEqual(x.replace(np.ones((1, 4, 6))).case_id, "case0001")

    def test_label_map(self):
        indices = np.array([[0, 1], [2, 3]])
        y = oodcal.LabelMap.from_indices(indices, 4)
        np.testing.assert_array_equal(y.indices, indices)
        self.assertEqual(y.num_classes, 4)
        with self.subTest("not one-hot"):
            with self.assertRaises(oodcal.ValidationError):
                oodcal.LabelMap(np.ones((2, 2, 2)))
        with self.subTest("single class"):
            with self.assertRaises(oodcal.ShapeMismatch):
                oodcal.LabelMap(np.ones((1, 2, 2)))
        with self.subTest("out of range"):
            with self.assertRaises(oodcal.ValidationError):
                oodcal.LabelMap.from_indices(indices, 3)

    def test_probability_map(self):
        with self.assertRaises(oodcal.ValidationError):
            oodcal.ProbabilityMap(np.full((2, 2, 2), 0.6))
        with self.assertRaises(oodcal.ValidationError):
            oodcal.ProbabilityMap(np.stack([np.full((2, 2), 1.5), np.full((2, 2), -0.5)]))
        p = oodcal.ProbabilityMap(np.full((4, 3, 3), 0.25))
        # ties resolve to the lowest class index
        np.testing.assert_array_equal(p.prediction, 0)

    def test_temperature_map(self):
        with self.assertRaises(oodcal.ShapeMismatch):
            oodcal.TemperatureMap(np.ones((2, 2, 2)))
        for bad in (0.0, -1.0):
            with self.subTest(value=bad):
                with self.assertRaises(oodcal.ValidationError):
                    oodcal.TemperatureMap(np.full((1, 2, 2), bad))

    def test_shape_residual(self):
        oodcal.ShapeResidual(np.full((2, 2, 2), -1.0))
        with self.assertRaises(oodcal.ValidationError):
            oodcal.ShapeResidual(np.full((2, 2, 2), 1.5))

    def test_susceptibility_estimate(self):
        with self.assertRaises(oodcal.ValidationError):
            oodcal.SusceptibilityEstimate(np.zeros((2, 2, 2)), -np.ones((2, 2, 2)), 2)
        with self.assertRaises(oodcal.ShapeMismatch):
            oodcal.SusceptibilityEstimate(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 2)
        with self.assertRaises(oodcal.ValidationError):
            oodcal.SusceptibilityEstimate(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), 0)

    def test_dataset_split(self):
        ids = [faker.unique.pystr(min_chars=4, max_chars=8) for _ in range(5)]
        split = oodcal.DatasetSplit(ids[:3], ids[3:4], ids[4:])
        restored = oodcal.DatasetSplit.from_dict(split.to_dict())
        self.assertEqual(restored.to_dict(), split.to_dict())
        self.assertEqual(split.roles[oodcal.SplitRole.CALIBRATION_TRAIN], (ids[3],))
        with self.assertRaises(oodcal.ValidationError):
            oodcal.DatasetSplit(ids[:3], ids[2:4], ids[4:])

    def test_calibrator_kind(self):
        self.assertIs(oodcal.CalibratorKind.parse("uc"), oodcal.CalibratorKind.UNCALIBRATED)
        self.assertIs(oodcal.CalibratorKind.parse("ts"), oodcal.CalibratorKind.GLOBAL_TS)
        self.assertIs(oodcal.CalibratorKind.parse("lts"), oodcal.CalibratorKind.LTS)
        with self.assertRaises(ValueError):
            oodcal.CalibratorKind.parse("focal")
        self.assertEqual(
            [k.value for k in oodcal.CalibratorKind if not k.preserves_argmax], ["alea"]
        )

    def test_exceptions_carry_context(self):
        exc = oodcal.StageFailed("boom", stage="calibrate")
        self.assertEqual(str(exc), "[calibrate] boom")
        self.assertIsInstance(exc, RuntimeError)
        missing = oodcal.MissingArtifacts("absent", missing=[Path("a"), "b"])
        self.assertEqual(missing.missing, ("a", "b"))
        self.assertIn("a, b", str(missing))
        self.assertIsInstance(missing, FileNotFoundError)
        diverged = oodcal.TrainingDiverged("nan", stage="train_seg", epoch=3)
        self.assertEqual((diverged.stage, diverged.epoch), ("train_seg", 3))
        self.assertEqual(oodcal.ConfigError("bad", key="a.b").key, "a.b")


class TensorFormatTests(SimpleTestCase):
    def test_write_read(self):
        grid = np.random.default_rng(4).normal(size=(3, 5, 7))
        with tempfile.TemporaryDirectory() as tmp:
            path = oodcal.write_tensor(Path(tmp) / "grid", grid)
            header = json.loads((path / "header.json").read_text())
            self.assertEqual(header["shape"], [3, 5, 7])
            self.assertEqual(header["dtype"], "float32")
            self.assertEqual(header["endianness"], "little")
            self.assertEqual((path / "data.bin").stat().st_size, 3 * 5 * 7 * 4)
            restored = oodcal.read_tensor(path)
            self.assertEqual(restored.dtype, np.float32)
            np.testing.assert_array_equal(restored, grid.astype(np.float32))

    def test_payload_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = oodcal.write_tensor(Path(tmp) / "grid", np.zeros((2, 2)))
            (path / "data.bin").write_bytes(b"\x00" * 12)
            with self.assertRaises(oodcal.TensorFormatError):
                oodcal.read_tensor(path)

    def test_unsupported_header(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = oodcal.write_tensor(Path(tmp) / "grid", np.zeros((2, 2)))
            header = json.loads((path / "header.json").read_text())
            for key, value in (("dtype", "float64"), ("endianness", "big")):
                with self.subTest(key=key):
                    (path / "header.json").write_text(json.dumps({**header, key: value}))
                    with self.assertRaises(oodcal.TensorFormatError):
                        oodcal.read_tensor(path)
            with self.subTest("missing header"):
                (path / "header.json").unlink()
                with self.assertRaises(oodcal.TensorFormatError):
                    oodcal.read_tensor(path)

    def test_non_finite_payload_is_reported(self):
        grid = np.zeros((2, 2))
        grid[0, 1] = np.nan
        with tempfile.TemporaryDirectory() as tmp:
            check = oodcal.validate_tensor(oodcal.write_tensor(Path(tmp) / "grid", grid))
            self.assertEqual(check.shape, (2, 2))
            self.assertFalse(check.finite)

    def test_case_layout(self):
        case_id = faker.pystr(min_chars=6, max_chars=10)
        rng = np.random.default_rng(5)
        slices = [
            (
                oodcal.ImageSlice(rng.uniform(size=(1, 6, 6)), case_id, index),
                oodcal.LabelMap.from_indices(rng.integers(0, 4, (6, 6)), 4),
            )
            for index in range(3)
        ]
        with tempfile.TemporaryDirectory() as tmp:
            oodcal.write_case(tmp, slices)
            self.assertTrue((Path(tmp) / case_id / "image" / "002").is_dir())
            self.assertEqual(oodcal.list_cases(tmp), [case_id])
            restored = oodcal.read_case(tmp, case_id)
            self.assertEqual([x.slice_index for x, _ in restored], [0, 1, 2])
            for (x, y), (rx, ry) in zip(slices, restored):
                np.testing.assert_array_equal(rx.data, x.data.astype(np.float32))
                np.testing.assert_array_equal(ry.indices, y.indices)
            with self.assertRaises(FileNotFoundError):
                oodcal.read_case(tmp, case_id, image_part="image.spike-moderate")


class SeedTests(SimpleTestCase):
    def test_derive_seed(self):
        self.assertEqual(oodcal.derive_seed("a", 1), oodcal.derive_seed("a", 1))
        self.assertNotEqual(oodcal.derive_seed("a", 1), oodcal.derive_seed("a", 2))
        self.assertLess(oodcal.derive_seed(faker.pystr()), 2**32)

    def test_make_rng(self):
        np.testing.assert_array_equal(
            oodcal.make_rng("x", 3).normal(size=4), oodcal.make_rng("x", 3).normal(size=4)
        )
        np.testing.assert_array_equal(
            oodcal.make_rng("x", 3).normal(size=4),
            np.random.default_rng(oodcal.derive_seed("x", 3)).normal(size=4),
        )
        self.assertFalse(
            np.array_equal(
                oodcal.make_rng("x", 3).normal(size=4), oodcal.make_rng("x", 4).normal(size=4)
            )
        )

    def test_stable_digest(self):
        a = np.zeros((2, 3))
        self.assertEqual(oodcal.stable_digest("k", a), oodcal.stable_digest("k", a.copy()))
        self.assertNotEqual(oodcal.stable_digest(a), oodcal.stable_digest(a.reshape(3, 2)))
        self.assertNotEqual(oodcal.stable_digest({"a": 1}), oodcal.stable_digest({"a": 2}))


class CacheTests(SimpleTestCase):
    def tearDown(self):
        get_OODCAL_CACHE.cache_clear()
        _get_kind_hash.cache_clear()

    def test_key_hash_settings(self):
        _get_kind_hash.cache_clear()
        for hash_name in ["md5", "sha256", "sha512"]:
            with override_settings(OODCAL_KEY_HASH=hash_name):
                _get_kind_hash.cache_clear()
                key = get_cache_key("susceptibility", "abc")
                self.assertTrue(key.startswith("ooc:"))
                self.assertTrue(key.endswith(":abc"))
                self.assertEqual(len(key.split(":")[1]), 15)

    def test_memoised(self):
        calls = []
        key = faker.pystr()

        def compute():
            calls.append(1)
            return {"mu": np.arange(4.0)}

        first = cached_arrays("test-memo", (key,), compute)
        second = cached_arrays("test-memo", (key,), compute)
        self.assertEqual(len(calls), 1)
        self.assertEqual(first["mu"].dtype, np.float32)
        np.testing.assert_array_equal(first["mu"], second["mu"])

    @override_settings(OODCAL_CACHE="dummy")
    def test_tensor_directory_layer(self):
        get_OODCAL_CACHE.cache_clear()
        calls = []

        def compute():
            calls.append(1)
            return {"mu": np.ones((2, 2)), "var": np.zeros((2, 2))}

        with tempfile.TemporaryDirectory() as tmp:
            cached_arrays("test-disk", ("k",), compute, store_dir=tmp)
            restored = cached_arrays("test-disk", ("k",), compute, store_dir=tmp)
            self.assertEqual(len(calls), 1)
            self.assertEqual(sorted(restored), ["mu", "var"])
            self.assertTrue((Path(tmp) / "test-disk").is_dir())
