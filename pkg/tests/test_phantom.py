import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from django_ood_calibration import DegenerateGeometry, ValidationError, list_cases, read_case
from django_ood_calibration.phantom import (
    BACKGROUND,
    LV,
    MYOCARDIUM,
    RV,
    PhantomConfig,
    case_id_for,
    generate_case,
    generate_dataset,
    make_splits,
    rotate_folds,
)


class GenerateCaseTests(SimpleTestCase):
    def test_deterministic(self):
        config = PhantomConfig(image_size=64)
        first = generate_case(config, 7)
        second = generate_case(config, 7)
        for (x1, y1), (x2, y2) in zip(first, second):
            self.assertEqual(x1.data.tobytes(), x2.data.tobytes())
            self.assertEqual(y1.data.tobytes(), y2.data.tobytes())
        other = generate_case(config, 8)
        self.assertNotEqual(first[0][0].data.tobytes(), other[0][0].data.tobytes())

    def test_slices(self):
        config = PhantomConfig(image_size=64, slices_per_case=3)
        slices = generate_case(config, 3)
        self.assertEqual([x.slice_index for x, _ in slices], [0, 1, 2])
        self.assertEqual({x.case_id for x, _ in slices}, {case_id_for(3)})
        for x, y in slices:
            self.assertEqual(x.shape, (64, 64))
            self.assertGreaterEqual(x.data.min(), 0.0)
            self.assertLessEqual(x.data.max(), 1.0)
            self.assertEqual(set(np.unique(y.indices)), {BACKGROUND, RV, MYOCARDIUM, LV})
        # apical slices shrink
        areas = [int(np.sum(y.indices != BACKGROUND)) for _, y in slices]
        self.assertEqual(areas, sorted(areas, reverse=True))

    def test_piecewise_constant(self):
        config = PhantomConfig(
            image_size=64, noise_std=0.0, center_jitter=0.0, gradient_amplitude=0.0
        )
        for x, y in generate_case(config, 1):
            levels = {}
            for label in range(4):
                values = np.unique(x.data[0][y.indices == label])
                with self.subTest(label=label):
                    self.assertEqual(len(values), 1)
                levels[label] = float(values[0])
            self.assertEqual(len(set(levels.values())), 4)

    def test_lv_inside_myocardium(self):
        config = PhantomConfig()
        for case_seed in range(5):
            for _, y in generate_case(config, case_seed):
                labels = y.indices
                lv = labels == LV
                padded = np.pad(labels, 1, constant_values=BACKGROUND)
                for dy, dx in ((0, 1), (2, 1), (1, 0), (1, 2)):
                    neighbours = padded[dy : dy + labels.shape[0], dx : dx + labels.shape[1]]
                    self.assertTrue(np.all(np.isin(neighbours[lv], (LV, MYOCARDIUM))))

    def test_class_frequencies(self):
        config = PhantomConfig()
        counts = np.zeros(4)
        for case_seed in range(50):
            for _, y in generate_case(config, case_seed):
                counts += np.bincount(y.indices.ravel(), minlength=4)
        self.assertGreater(counts[BACKGROUND], counts[MYOCARDIUM])
        self.assertGreater(counts[BACKGROUND], counts[LV])
        self.assertGreater(min(counts[MYOCARDIUM], counts[LV]), counts[RV])
        self.assertLess(counts[MYOCARDIUM] / counts[LV], 2.0)
        self.assertLess(counts[LV] / counts[MYOCARDIUM], 2.0)

    def test_degenerate_geometry(self):
        with self.assertRaises(DegenerateGeometry):
            generate_case(PhantomConfig(image_size=8), 0)

    def test_invalid_config(self):
        for kwargs in (
            {"class_count": 3},
            {"lv_radius": (20, 10)},
            {"image_size": 4},
            {"noise_std": -1},
            {"intensity_means": (0.1, 0.2)},
        ):
            with self.subTest(**{k: str(v) for k, v in kwargs.items()}):
                with self.assertRaises(ValidationError):
                    PhantomConfig(**kwargs)


class SplitTests(SimpleTestCase):
    def setUp(self):
        self.case_ids = [case_id_for(i) for i in range(100)]

    def test_sizes(self):
        split = make_splits(self.case_ids, (0.6, 0.2, 0.2), seed=0)
        self.assertEqual(
            (len(split.train), len(split.validation), len(split.test)), (60, 20, 20)
        )
        self.assertEqual(
            sorted(split.train + split.validation + split.test), sorted(self.case_ids)
        )

    def test_train_only(self):
        split = make_splits(self.case_ids[:10], (1, 0, 0), seed=0)
        self.assertEqual(len(split.train), 10)
        self.assertEqual(split.validation + split.test, ())

    def test_deterministic(self):
        first = make_splits(self.case_ids, (0.6, 0.2, 0.2), seed=3)
        second = make_splits(list(reversed(self.case_ids)), (0.6, 0.2, 0.2), seed=3)
        self.assertEqual(first.to_dict(), second.to_dict())
        other = make_splits(self.case_ids, (0.6, 0.2, 0.2), seed=4)
        self.assertNotEqual(first.to_dict(), other.to_dict())

    def test_errors(self):
        with self.subTest("too few cases"):
            with self.assertRaises(ValidationError):
                make_splits(self.case_ids[:2], (0.6, 0.2, 0.2), seed=0)
        with self.subTest("ratios"):
            with self.assertRaises(ValidationError):
                make_splits(self.case_ids, (0.5, 0.2, 0.2), seed=0)

    def test_small_parts_are_filled(self):
        split = make_splits(self.case_ids[:8], (0.6, 0.2, 0.2), seed=0)
        self.assertTrue(all(len(part) >= 1 for part in split.roles.values()))
        self.assertEqual(len(split.train + split.validation + split.test), 8)

    def test_rotate_folds(self):
        split = make_splits(self.case_ids[:30], (0.6, 0.2, 0.2), seed=0)
        folds = rotate_folds(split, n_folds=3)
        self.assertEqual(len(folds), 3)
        self.assertEqual({len(f.train) for f in folds}, {6})
        self.assertEqual({f.test for f in folds}, {split.test})
        self.assertEqual(len(set(sum((f.train for f in folds), ()))), 18)
        with self.assertRaises(ValidationError):
            rotate_folds(split, n_folds=0)


class GenerateDatasetTests(SimpleTestCase):
    def test_writes_cases_and_manifest(self):
        config = PhantomConfig(image_size=32, slices_per_case=2)
        with tempfile.TemporaryDirectory() as tmp:
            split = generate_dataset(tmp, config, num_cases=6, split_seed=1)
            manifest = json.loads((Path(tmp) / "manifest.json").read_text())
            self.assertEqual(manifest["split"], split.to_dict())
            self.assertEqual(manifest["phantom"]["image_size"], 32)
            self.assertEqual(list_cases(tmp), manifest["cases"])
            slices = read_case(tmp, manifest["cases"][0])
            self.assertEqual(len(slices), 2)
            expected = generate_case(config, 0)
            np.testing.assert_array_equal(slices[0][0].data, expected[0][0].data)
