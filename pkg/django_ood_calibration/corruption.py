"""
k-space and intensity artifacts for out-of-domain test sets

Corruptions are test-time only; no augmentation policy may reference them.
"""

__all__ = [
    "CorruptionSpec",
    "RigidMotion",
    "SEVERITY_PRESETS",
    "apply_identity",
    "apply_bias_field",
    "apply_ghosting",
    "apply_spike",
    "apply_motion",
    "apply_corruption",
    "add_kspace_spikes",
    "sample_motion",
    "motion_segments",
    "polynomial_terms",
    "corruption_tag",
    "corrupt_dataset",
]

import functools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Final, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from ._core import derive_seed, list_cases, make_rng, read_case, write_case
from .misc import CorruptionKind, ImageSlice, Severity, ValidationError

logger = logging.getLogger(__name__)


def _finish(x: ImageSlice, image: np.ndarray) -> ImageSlice:
    return x.replace(np.clip(image, 0.0, 1.0)[None].astype(x.data.dtype))


def _image(x: ImageSlice) -> np.ndarray:
    return x.data[0].astype(np.float64)


def apply_identity(x: ImageSlice, seed: int = 0) -> ImageSlice:
    return x


@functools.lru_cache(maxsize=16)
def polynomial_terms(order: int) -> tuple:
    """exponent pairs (i, j) with i + j <= order, constant term first"""
    if order < 0:
        raise ValidationError("bias field order must be >= 0")
    return tuple((i, d - i) for d in range(order + 1) for i in range(d, -1, -1))


def apply_bias_field(
    x: ImageSlice,
    order: int = 3,
    coeff_range: tuple = (-0.5, 0.5),
    seed: int = 0,
    coefficients: Optional[Sequence[float]] = None,
) -> ImageSlice:
    """
    Multiply by exp(P) with P a 2-D polynomial of total degree <= order.

    Coordinates are scaled to [-1, 1]; coefficients are drawn uniformly from
    coeff_range unless given explicitly (ordered like polynomial_terms).
    """
    terms = polynomial_terms(order)
    if coefficients is None:
        rng = make_rng("bias_field", seed)
        coefficients = rng.uniform(coeff_range[0], coeff_range[1], len(terms))
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (len(terms),):
        raise ValidationError(f"order {order} needs {len(terms)} coefficients")
    rows, cols = x.shape
    m = np.linspace(-1.0, 1.0, rows)[:, None]
    n = np.linspace(-1.0, 1.0, cols)[None, :]
    poly = np.zeros((rows, cols))
    for (i, j), c in zip(terms, coefficients):
        poly = poly + c * m**i * n**j
    return _finish(x, _image(x) * np.exp(poly))


def apply_ghosting(
    x: ImageSlice,
    num_ghosts: int = 4,
    axis: Optional[int] = 0,
    intensity: float = 0.5,
    seed: int = 0,
) -> ImageSlice:
    """attenuate every k-space line whose index along axis is not a multiple of num_ghosts"""
    if axis is None:
        axis = int(make_rng("ghosting", seed).integers(2))
    if axis not in (0, 1):
        raise ValidationError("axis must be 0 or 1")
    if not 0 <= intensity <= 1:
        raise ValidationError("ghosting intensity must be in [0, 1]")
    length = x.shape[axis]
    if num_ghosts < 1 or num_ghosts >= length:
        raise ValidationError(
            f"num_ghosts must be in [1, {length}), got {num_ghosts}"
        )
    kspace = np.fft.fft2(_image(x))
    lines = np.arange(length) % num_ghosts != 0
    factor = np.where(lines, 1.0 - intensity, 1.0)
    factor = factor[:, None] if axis == 0 else factor[None, :]
    return _finish(x, np.fft.ifft2(kspace * factor).real)


def add_kspace_spikes(kspace: np.ndarray, positions, values) -> np.ndarray:
    kspace = np.array(kspace, dtype=np.complex128, copy=True)
    for (u, v), value in zip(positions, values):
        kspace[u % kspace.shape[0], v % kspace.shape[1]] += value
    return kspace


def apply_spike(
    x: ImageSlice,
    spike_pos: Optional[tuple] = None,
    intensity: float = 0.5,
    seed: int = 0,
    symmetric: bool = False,
) -> ImageSlice:
    """
    Add intensity * max|K| to one k-space bin.

    With symmetric=True the conjugate bin receives the conjugate value so the
    inverse transform is real before the real part is taken.
    """
    rows, cols = x.shape
    if spike_pos is None:
        rng = make_rng("spike", seed)
        while True:
            u = int(rng.integers(-(rows // 4), rows // 4 + 1))
            v = int(rng.integers(-(cols // 4), cols // 4 + 1))
            if (u, v) != (0, 0):
                break
        spike_pos = (u, v)
    u, v = int(spike_pos[0]), int(spike_pos[1])
    if u % rows == 0 and v % cols == 0:
        raise ValidationError("a spike on the DC bin is not an artifact")
    kspace = np.fft.fft2(_image(x))
    value = intensity * np.abs(kspace).max()
    positions, values = [(u, v)], [value]
    if symmetric:
        positions.append((-u, -v))
        values.append(np.conj(value))
    return _finish(x, np.fft.ifft2(add_kspace_spikes(kspace, positions, values)).real)


@dataclass(frozen=True)
class RigidMotion:
    rotation: float = 0.0
    shift: tuple = (0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0 and self.shift == (0.0, 0.0)


def sample_motion(
    num_movements: int, max_rot: float, max_shift: float, seed: int
) -> list:
    if num_movements < 1:
        raise ValidationError("num_movements must be >= 1")
    rng = make_rng("motion", seed)
    motions = []
    for _ in range(num_movements):
        rotation = float(rng.uniform(-max_rot, max_rot)) if max_rot > 0 else 0.0
        shift = (
            tuple(float(s) for s in rng.uniform(-max_shift, max_shift, 2))
            if max_shift > 0
            else (0.0, 0.0)
        )
        motions.append(RigidMotion(rotation, shift))
    return motions


def _moved_kspace(image: np.ndarray, motion: RigidMotion) -> np.ndarray:
    if motion.rotation:
        image = ndimage.rotate(
            image, motion.rotation, reshape=False, order=1, mode="nearest"
        )
    kspace = np.fft.fft2(image)
    if motion.shift != (0.0, 0.0):
        # translation as a linear phase ramp
        kspace = ndimage.fourier_shift(kspace, motion.shift)
    return kspace


def motion_segments(rows: int, num_movements: int) -> np.ndarray:
    """boundaries of the num_movements + 1 acquisition segments over centered k-space rows"""
    return np.round(np.linspace(0, rows, num_movements + 2)).astype(int)


def apply_motion(
    x: ImageSlice,
    num_movements: int = 2,
    max_rot: float = 5.0,
    max_shift: float = 5.0,
    seed: int = 0,
    motions: Optional[Sequence[RigidMotion]] = None,
) -> ImageSlice:
    """
    Compose k-space from the original and num_movements moved copies.

    Centered k-space rows are acquired in num_movements + 1 contiguous segments;
    segment 0 comes from the original, segment j from moved copy j.
    """
    if motions is None:
        motions = sample_motion(num_movements, max_rot, max_shift, seed)
    if len(motions) < 1:
        raise ValidationError("num_movements must be >= 1")
    image = _image(x)
    rows = image.shape[0]
    spectra = [np.fft.fft2(image)] + [_moved_kspace(image, m) for m in motions]
    bounds = motion_segments(rows, len(motions))
    composite = np.empty_like(spectra[0])
    centered = [np.fft.fftshift(k) for k in spectra]
    for j, kspace in enumerate(centered):
        composite[bounds[j] : bounds[j + 1]] = kspace[bounds[j] : bounds[j + 1]]
    return _finish(x, np.abs(np.fft.ifft2(np.fft.ifftshift(composite))))


SEVERITY_PRESETS: Final = {
    CorruptionKind.IDENTITY: {s: {} for s in Severity},
    CorruptionKind.BIAS_FIELD: {
        Severity.MILD: {"order": 3, "coeff_range": (-0.3, 0.3)},
        Severity.MODERATE: {"order": 3, "coeff_range": (-0.5, 0.5)},
        Severity.SEVERE: {"order": 3, "coeff_range": (-0.8, 0.8)},
    },
    CorruptionKind.MOTION: {
        Severity.MILD: {"num_movements": 2, "max_rot": 3.0, "max_shift": 3.0},
        Severity.MODERATE: {"num_movements": 3, "max_rot": 6.0, "max_shift": 6.0},
        Severity.SEVERE: {"num_movements": 4, "max_rot": 10.0, "max_shift": 10.0},
    },
    CorruptionKind.GHOSTING: {
        Severity.MILD: {"num_ghosts": 8, "intensity": 0.4, "axis": None},
        Severity.MODERATE: {"num_ghosts": 6, "intensity": 0.6, "axis": None},
        Severity.SEVERE: {"num_ghosts": 4, "intensity": 0.85, "axis": None},
    },
    CorruptionKind.SPIKE: {
        Severity.MILD: {"intensity": 0.2},
        Severity.MODERATE: {"intensity": 0.4},
        Severity.SEVERE: {"intensity": 0.7},
    },
}

_APPLY: Final = {
    CorruptionKind.IDENTITY: apply_identity,
    CorruptionKind.BIAS_FIELD: apply_bias_field,
    CorruptionKind.MOTION: apply_motion,
    CorruptionKind.GHOSTING: apply_ghosting,
    CorruptionKind.SPIKE: apply_spike,
}

# shifts in the presets are for 128 px slices
_PIXEL_PARAMS: Final = frozenset({"max_shift"})

_EXTRA_PARAMS: Final = {
    CorruptionKind.BIAS_FIELD: frozenset({"coefficients"}),
    CorruptionKind.SPIKE: frozenset({"spike_pos", "symmetric"}),
    CorruptionKind.MOTION: frozenset({"motions"}),
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    severity: Severity = Severity.MODERATE
    seed: int = 0
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", CorruptionKind(self.kind))
        object.__setattr__(self, "severity", Severity(self.severity))
        unknown = set(self.params) - set(
            SEVERITY_PRESETS[self.kind][Severity.MODERATE]
        ).union(_EXTRA_PARAMS.get(self.kind, ()))
        if unknown:
            raise ValidationError(
                f"unknown {self.kind.value} parameters: {sorted(unknown)}"
            )

    @property
    def tag(self) -> str:
        return corruption_tag(self.kind, self.severity)

    def resolved_params(self, image_size: int) -> dict:
        params = dict(SEVERITY_PRESETS[self.kind][self.severity])
        for name in _PIXEL_PARAMS.intersection(params):
            params[name] = params[name] * image_size / 128
        params.update(self.params)
        return params


def corruption_tag(kind, severity) -> str:
    kind = CorruptionKind(kind)
    if kind is CorruptionKind.IDENTITY:
        return "clean"
    return "%s-%s" % (kind.value, Severity(severity).value)


def apply_corruption(x: ImageSlice, spec: CorruptionSpec) -> ImageSlice:
    """apply spec to x with a seed derived from (spec.seed, case, slice)"""
    seed = derive_seed(spec.seed, spec.kind.value, x.case_id, x.slice_index)
    params = spec.resolved_params(x.shape[0])
    return _APPLY[spec.kind](x, seed=seed, **params)


def corrupt_dataset(root, specs: Sequence[CorruptionSpec], case_ids=None) -> list:
    """write corrupted copies beside the originals as <case>/image.<tag>/<idx>"""
    root = Path(root)
    if case_ids is None:
        case_ids = list_cases(root)
    written = []
    for spec in specs:
        if spec.kind is CorruptionKind.IDENTITY:
            continue
        for case_id in case_ids:
            corrupted = [
                (apply_corruption(image, spec), None)
                for image, _label in read_case(root, case_id)
            ]
            written.extend(write_case(root, corrupted, image_part="image." + spec.tag))
        logger.info("wrote %s copies of %d cases", spec.tag, len(case_ids))
    return written
