import tempfile

import numpy as np
from django.test import SimpleTestCase

from django_ood_calibration import (
    CorruptionKind,
    ImageSlice,
    Severity,
    ValidationError,
    read_case,
)
from django_ood_calibration.corruption import (
    CorruptionSpec,
    RigidMotion,
    add_kspace_spikes,
    apply_bias_field,
    apply_corruption,
    apply_ghosting,
    apply_motion,
    apply_spike,
    corrupt_dataset,
    corruption_tag,
    motion_segments,
    polynomial_terms,
)
from django_ood_calibration.phantom import PhantomConfig, generate_case, generate_dataset

SIZE = 32


def phantom_slice(seed=0):
    return generate_case(PhantomConfig(image_size=SIZE), seed)[0][0]


def constant_slice(value=0.5):
    return ImageSlice(np.full((1, SIZE, SIZE), value, dtype=np.float32))


class BiasFieldTests(SimpleTestCase):
    def test_polynomial_terms(self):
        self.assertEqual(polynomial_terms(0), ((0, 0),))
        self.assertEqual(len(polynomial_terms(3)), 10)
        with self.assertRaises(ValidationError):
            polynomial_terms(-1)

    def test_zero_coefficients(self):
        x = phantom_slice()
        out = apply_bias_field(x, coefficients=np.zeros(10))
        np.testing.assert_array_equal(out.data, x.data)

    def test_constant_coefficient(self):
        x = phantom_slice()
        coefficients = np.zeros(10)
        coefficients[0] = 0.3
        out = apply_bias_field(x, coefficients=coefficients)
        expected = np.clip(x.data.astype(np.float64) * np.exp(0.3), 0, 1)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_random_field(self):
        x = constant_slice(0.3)
        out = apply_bias_field(x, seed=4)
        self.assertTrue(np.all(out.data > 0))
        self.assertLessEqual(out.data.max(), 1.0)

    def test_wrong_coefficient_count(self):
        with self.assertRaises(ValidationError):
            apply_bias_field(phantom_slice(), order=2, coefficients=np.zeros(10))


class GhostingTests(SimpleTestCase):
    def test_zero_intensity(self):
        x = phantom_slice()
        np.testing.assert_allclose(apply_ghosting(x, intensity=0.0).data, x.data, atol=1e-6)

    def test_impulse_replicas(self):
        impulse = np.zeros((1, SIZE, SIZE))
        impulse[0, SIZE // 2, SIZE // 2] = 1.0
        out = apply_ghosting(ImageSlice(impulse), num_ghosts=4, axis=0, intensity=1.0).data[0]
        period = SIZE // 4
        expected = np.zeros((SIZE, SIZE))
        expected[SIZE // 2 % period :: period, SIZE // 2] = 0.25
        np.testing.assert_allclose(out, expected, atol=1e-6)
        peaks = np.sort(np.argsort(out[:, SIZE // 2])[-4:])
        np.testing.assert_array_equal(np.diff(peaks), period)

    def test_constant_image(self):
        for num_ghosts in (2, 5):
            for intensity in (0.3, 1.0):
                with self.subTest(num_ghosts=num_ghosts, intensity=intensity):
                    out = apply_ghosting(constant_slice(), num_ghosts, 1, intensity)
                    np.testing.assert_allclose(out.data, 0.5, atol=1e-6)

    def test_validation(self):
        x = phantom_slice()
        for kwargs in ({"num_ghosts": SIZE}, {"num_ghosts": 0}, {"intensity": 1.5}, {"axis": 2}):
            with self.subTest(**kwargs):
                with self.assertRaises(ValidationError):
                    apply_ghosting(x, **kwargs)


class SpikeTests(SimpleTestCase):
    def test_zero_intensity(self):
        x = phantom_slice()
        np.testing.assert_allclose(
            apply_spike(x, spike_pos=(3, 2), intensity=0.0).data, x.data, atol=1e-6
        )

    def test_stripes(self):
        u = 5
        out = apply_spike(constant_slice(), spike_pos=(u, 0), intensity=0.2).data[0]
        # stripes vary along rows only
        np.testing.assert_allclose(out, out[:, :1].repeat(SIZE, axis=1), atol=1e-6)
        spectrum = np.abs(np.fft.fft2(out.astype(np.float64)))
        spectrum[0, 0] = 0
        peak = np.unravel_index(np.argmax(spectrum), spectrum.shape)
        self.assertIn(tuple(int(i) for i in peak), {(u, 0), (SIZE - u, 0)})

    def test_symmetric_spikes_are_real(self):
        x = phantom_slice()
        kspace = np.fft.fft2(x.data[0].astype(np.float64))
        value = 3.0 + 4.0j
        spiked = add_kspace_spikes(kspace, [(3, 5), (-3, -5)], [value, np.conj(value)])
        self.assertLess(np.abs(np.fft.ifft2(spiked).imag).max(), 1e-9)
        out = apply_spike(x, spike_pos=(3, 5), intensity=0.3, symmetric=True)
        self.assertEqual(out.shape, x.shape)

    def test_dc_rejected(self):
        for pos in ((0, 0), (SIZE, 0)):
            with self.subTest(pos=pos):
                with self.assertRaises(ValidationError):
                    apply_spike(phantom_slice(), spike_pos=pos)

    def test_sampled_position(self):
        x = phantom_slice()
        first = apply_spike(x, seed=3)
        np.testing.assert_array_equal(first.data, apply_spike(x, seed=3).data)
        self.assertFalse(np.array_equal(first.data, x.data))


class MotionTests(SimpleTestCase):
    def test_no_motion(self):
        x = phantom_slice()
        out = apply_motion(x, num_movements=3, max_rot=0.0, max_shift=0.0, seed=2)
        np.testing.assert_allclose(out.data, x.data, atol=1e-5)

    def test_single_shift_composition(self):
        x = phantom_slice(1)
        shift = 3.0
        out = apply_motion(x, motions=[RigidMotion(0.0, (shift, 0.0))])
        image = x.data[0].astype(np.float64)
        original = np.fft.fft2(image)
        freq = np.fft.fftfreq(SIZE)
        moved = original * np.exp(-2j * np.pi * freq[:, None] * shift)
        self.assertEqual(list(motion_segments(SIZE, 1)), [0, SIZE // 2, SIZE])
        composite = np.fft.fftshift(original)
        composite[SIZE // 2 :] = np.fft.fftshift(moved)[SIZE // 2 :]
        expected = np.clip(np.abs(np.fft.ifft2(np.fft.ifftshift(composite))), 0, 1)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-6)

    def test_deterministic(self):
        x = phantom_slice()
        np.testing.assert_array_equal(apply_motion(x, seed=5).data, apply_motion(x, seed=5).data)

    def test_requires_movement(self):
        with self.assertRaises(ValidationError):
            apply_motion(phantom_slice(), num_movements=0)


class CorruptionSpecTests(SimpleTestCase):
    def test_range_and_shape(self):
        x = phantom_slice()
        for kind in CorruptionKind:
            for severity in Severity:
                with self.subTest(kind=kind.value, severity=severity.value):
                    out = apply_corruption(x, CorruptionSpec(kind, severity, seed=1))
                    self.assertEqual(out.shape, x.shape)
                    self.assertTrue(np.all(np.isfinite(out.data)))
                    self.assertGreaterEqual(out.data.min(), 0.0)
                    self.assertLessEqual(out.data.max(), 1.0)
                    self.assertEqual((out.case_id, out.slice_index), (x.case_id, x.slice_index))

    def test_identity_passthrough(self):
        x = phantom_slice()
        self.assertIs(apply_corruption(x, CorruptionSpec("identity")), x)

    def test_tags(self):
        self.assertEqual(CorruptionSpec("spike").tag, "spike-moderate")
        self.assertEqual(corruption_tag("bias_field", "severe"), "bias_field-severe")
        self.assertEqual(corruption_tag(CorruptionKind.IDENTITY, Severity.MILD), "clean")

    def test_params(self):
        spec = CorruptionSpec("motion", "moderate", params={"num_movements": 1})
        params = spec.resolved_params(64)
        self.assertEqual(params["num_movements"], 1)
        self.assertEqual(params["max_shift"], 3.0)
        with self.assertRaises(ValidationError):
            CorruptionSpec("ghosting", params={"sigma": 1})
        with self.assertRaises(ValueError):
            CorruptionSpec("blur")

    def test_deterministic_per_slice(self):
        slices = generate_case(PhantomConfig(image_size=SIZE), 0)
        spec = CorruptionSpec("spike", seed=0)
        first = apply_corruption(slices[0][0], spec)
        self.assertEqual(
            first.data.tobytes(), apply_corruption(slices[0][0], spec).data.tobytes()
        )

    def test_corrupt_dataset(self):
        config = PhantomConfig(image_size=SIZE, slices_per_case=2)
        with tempfile.TemporaryDirectory() as tmp:
            split = generate_dataset(tmp, config, num_cases=3)
            specs = [CorruptionSpec("identity"), CorruptionSpec("ghosting", "mild", seed=2)]
            written = corrupt_dataset(tmp, specs, case_ids=split.test)
            self.assertEqual(len(written), 2 * len(split.test))
            case_id = split.test[0]
            corrupted = read_case(tmp, case_id, image_part="image.ghosting-mild")
            clean = read_case(tmp, case_id)
            self.assertEqual(len(corrupted), 2)
            for (cx, cy), (x, y) in zip(corrupted, clean):
                np.testing.assert_array_equal(cy.data, y.data)
                self.assertEqual(cx.shape, x.shape)
