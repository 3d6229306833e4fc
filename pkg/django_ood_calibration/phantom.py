"""
synthetic short-axis cardiac phantom: background, RV crescent, myocardium ring, LV disk
"""

__all__ = [
    "PhantomConfig",
    "BACKGROUND",
    "RV",
    "MYOCARDIUM",
    "LV",
    "generate_case",
    "generate_dataset",
    "make_splits",
    "rotate_folds",
    "case_id_for",
]

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Final, Sequence

import numpy as np

from ._core import make_rng, normalize_intensity, write_case
from .misc import (
    DatasetSplit,
    DegenerateGeometry,
    ImageSlice,
    LabelMap,
    ValidationError,
)

logger = logging.getLogger(__name__)

BACKGROUND: Final = 0
RV: Final = 1
MYOCARDIUM: Final = 2
LV: Final = 3

# geometry ranges are given for a 128 px slice and scaled with image_size
_REFERENCE_SIZE: Final = 128
_MAX_ATTEMPTS: Final = 100


def _check_range(name, value, low=None):
    if len(value) != 2 or value[0] > value[1]:
        raise ValidationError(f"{name} must be an ordered (low, high) pair")
    if low is not None and value[0] < low:
        raise ValidationError(f"{name} must be >= {low}")


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 128
    class_count: int = 4
    slices_per_case: int = 3
    lv_radius: tuple = (14.0, 22.0)
    myo_thickness: tuple = (6.0, 10.0)
    rv_thickness: tuple = (8.0, 14.0)
    rv_extent: tuple = (1.8, 2.8)
    rv_direction: tuple = (2.7, 3.6)
    center_jitter: float = 8.0
    # base to apex radial shrink per slice
    slice_shrink: float = 0.1
    # background, RV, myocardium, LV
    intensity_means: tuple = (0.12, 0.78, 0.32, 0.85)
    noise_std: float = 0.04
    gradient_amplitude: float = 0.08
    seed: int = 0

    def __post_init__(self):
        for name in ("lv_radius", "myo_thickness", "rv_thickness", "rv_extent"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
            _check_range(name, getattr(self, name), low=0)
        object.__setattr__(self, "rv_direction", tuple(self.rv_direction))
        _check_range("rv_direction", self.rv_direction)
        object.__setattr__(self, "intensity_means", tuple(self.intensity_means))
        if self.class_count != 4:
            raise ValidationError("the cardiac phantom has exactly 4 classes")
        if len(self.intensity_means) != self.class_count:
            raise ValidationError("one intensity mean per class required")
        if self.image_size < 8 or self.slices_per_case < 1:
            raise ValidationError("image_size >= 8 and slices_per_case >= 1 required")
        if self.noise_std < 0 or self.center_jitter < 0 or self.gradient_amplitude < 0:
            raise ValidationError("noise, jitter and gradient must be non-negative")
        if not 0 <= self.slice_shrink * (self.slices_per_case - 1) < 1:
            raise ValidationError("slice_shrink collapses apical slices")
        if self.lv_radius[1] <= 0 or self.myo_thickness[1] <= 0:
            raise ValidationError("LV radius and myocardium thickness must be positive")

    @property
    def scale(self) -> float:
        return self.image_size / _REFERENCE_SIZE

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class _Geometry:
    center: tuple
    lv_radius: float
    epi_radius: float
    rv_thickness: float
    rv_extent: float
    rv_direction: float

    def reach(self) -> float:
        return self.epi_radius + self.rv_thickness


def _sample_geometry(config: PhantomConfig, rng: np.random.Generator) -> _Geometry:
    s = config.scale
    half = (config.image_size - 1) / 2
    for _ in range(_MAX_ATTEMPTS):
        lv = rng.uniform(*config.lv_radius) * s
        myo = rng.uniform(*config.myo_thickness) * s
        geometry = _Geometry(
            center=tuple(half + rng.uniform(-1, 1, 2) * config.center_jitter * s),
            lv_radius=lv,
            epi_radius=lv + myo,
            rv_thickness=rng.uniform(*config.rv_thickness) * s,
            rv_extent=rng.uniform(*config.rv_extent),
            rv_direction=rng.uniform(*config.rv_direction),
        )
        offset = max(abs(c - half) for c in geometry.center)
        # non-degenerate structures that stay inside the field of view
        if (
            lv >= 1.5
            and myo >= 1.0
            and geometry.reach() + offset < half - 1
        ):
            return geometry
    raise DegenerateGeometry(
        f"no valid geometry after {_MAX_ATTEMPTS} attempts for size {config.image_size}"
    )


def _label_indices(config: PhantomConfig, geometry: _Geometry, shrink: float):
    size = config.image_size
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = rows - geometry.center[0]
    dx = cols - geometry.center[1]
    dist = np.hypot(dy, dx)
    angle = np.arctan2(dy, dx)
    lv_r = geometry.lv_radius * shrink
    epi_r = geometry.epi_radius * shrink

    labels = np.full((size, size), BACKGROUND, dtype=np.int64)
    if geometry.rv_extent > 0:
        # signed angular distance to the RV direction, wrapped to (-pi, pi]
        delta = np.angle(np.exp(1j * (angle - geometry.rv_direction)))
        inside = np.abs(delta) < geometry.rv_extent / 2
        # crescent thickness tapers to zero at both horns
        profile = np.where(
            inside,
            np.cos(np.pi * delta / geometry.rv_extent).clip(min=0),
            0.0,
        )
        rv_outer = epi_r + geometry.rv_thickness * shrink * profile
        labels[(dist >= epi_r) & (dist < rv_outer)] = RV
    labels[dist < epi_r] = MYOCARDIUM
    labels[dist < lv_r] = LV
    return labels


def _render(config: PhantomConfig, labels: np.ndarray, rng: np.random.Generator):
    size = config.image_size
    image = np.asarray(config.intensity_means, dtype=np.float64)[labels]
    if config.noise_std > 0:
        image = image + rng.normal(0.0, config.noise_std, image.shape)
    if config.gradient_amplitude > 0:
        coords = np.linspace(-1.0, 1.0, size)
        a, b = rng.uniform(-1, 1, 2)
        image = image + config.gradient_amplitude * (
            a * coords[:, None] + b * coords[None, :]
        )
    return normalize_intensity(image)


def case_id_for(case_seed: int) -> str:
    return "case%04d" % case_seed


def generate_case(config: PhantomConfig, case_seed: int) -> list:
    """
    Generate one phantom case as a list of (ImageSlice, LabelMap).

    Identical (config, case_seed) produce bit-identical slices.
    """
    rng = make_rng("phantom", config.seed, case_seed)
    geometry = _sample_geometry(config, rng)
    case_id = case_id_for(case_seed)
    slices = []
    for index in range(config.slices_per_case):
        shrink = 1.0 - config.slice_shrink * index
        labels = _label_indices(config, geometry, shrink)
        image = _render(config, labels, rng)
        slices.append(
            (
                ImageSlice(image[None].astype(np.float32), case_id, index),
                LabelMap.from_indices(labels, config.class_count),
            )
        )
    return slices


def make_splits(case_ids: Sequence[str], ratios: Sequence[float], seed: int) -> DatasetSplit:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0):
        raise ValidationError(f"split ratios {ratios} must be 3 non-negative values summing to 1")
    case_ids = sorted(case_ids)
    parts = sum(1 for r in ratios if r > 0)
    if len(case_ids) < parts:
        raise ValidationError(
            f"{len(case_ids)} cases cannot fill {parts} split parts"
        )
    n = len(case_ids)
    exact = [r * n for r in ratios]
    counts = [int(math.floor(e + 1e-9)) for e in exact]
    # largest remainder
    order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in range(3):
        if ratios[i] > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    rng = make_rng("split", seed)
    shuffled = [case_ids[i] for i in rng.permutation(n)]
    train = shuffled[: counts[0]]
    validation = shuffled[counts[0] : counts[0] + counts[1]]
    test = shuffled[counts[0] + counts[1] :]
    return DatasetSplit(train, validation, test)


def rotate_folds(
    split: DatasetSplit, n_folds: int = 3, train_per_fold=None, val_per_fold=None
) -> list:
    """
    Data-hungry rotation: each fold trains on a contiguous block of the training
    cases and calibrates on a block of the validation cases; the test part is shared.
    """
    if n_folds < 1:
        raise ValidationError("n_folds must be positive")
    train_per_fold = train_per_fold or max(1, len(split.train) // n_folds)
    val_per_fold = val_per_fold or max(1, len(split.validation) // n_folds)
    if train_per_fold > len(split.train) or val_per_fold > len(split.validation):
        raise ValidationError("fold sizes exceed the available cases")
    folds = []
    for fold in range(n_folds):
        start = (fold * train_per_fold) % len(split.train)
        train = [
            split.train[(start + i) % len(split.train)] for i in range(train_per_fold)
        ]
        vstart = (fold * val_per_fold) % len(split.validation)
        validation = [
            split.validation[(vstart + i) % len(split.validation)]
            for i in range(val_per_fold)
        ]
        folds.append(DatasetSplit(train, validation, split.test))
    return folds


def generate_dataset(
    root, config: PhantomConfig, num_cases: int, ratios=(0.6, 0.2, 0.2), split_seed: int = 0
) -> DatasetSplit:
    """write num_cases phantom cases plus manifest.json below root"""
    root = Path(root)
    case_ids = []
    for case_seed in range(num_cases):
        slices = generate_case(config, case_seed)
        write_case(root, slices)
        case_ids.append(slices[0][0].case_id)
        logger.debug("generated %s", case_ids[-1])
    split = make_splits(case_ids, ratios, split_seed)
    manifest = {
        "cases": case_ids,
        "split": split.to_dict(),
        "phantom": config.to_dict(),
        "source": "phantom",
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info("generated %d phantom cases in %s", num_cases, root)
    return split
