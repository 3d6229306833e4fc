__all__ = [
    "CorruptionKind",
    "CalibratorKind",
    "Severity",
    "SplitRole",
    "ImageSlice",
    "LabelMap",
    "LogitMap",
    "ProbabilityMap",
    "TemperatureMap",
    "ShapeResidual",
    "SusceptibilityEstimate",
    "DatasetSplit",
    "ValidationError",
    "NonFiniteError",
    "ShapeMismatch",
    "TensorFormatError",
    "EmptyRegion",
    "PolicyError",
    "ConfigError",
    "DegenerateGeometry",
    "TrainingDiverged",
    "MissingArtifacts",
    "StageFailed",
    "get_OODCAL_DEVICE",
    "get_OODCAL_CACHE",
    "get_OODCAL_NUM_THREADS",
]

import functools
import sys
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Final, Optional

import numpy as np
from django.conf import settings

PROBABILITY_TOLERANCE: Final = 1e-6


class CorruptionKind(str, Enum):
    IDENTITY = "identity"
    BIAS_FIELD = "bias_field"
    MOTION = "motion"
    GHOSTING = "ghosting"
    SPIKE = "spike"


class Severity(str, Enum):
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"


class CalibratorKind(str, Enum):
    UNCALIBRATED = "uncalibrated"
    GLOBAL_TS = "global_ts"
    LTS = "lts"
    ALEA = "alea"
    PROPOSED = "proposed"

    @property
    def preserves_argmax(self) -> bool:
        # averaging softmax over augmentations may move the argmax
        return self is not CalibratorKind.ALEA

    @classmethod
    def parse(cls, value: str) -> "CalibratorKind":
        return _CALIBRATOR_ALIASES.get(value, None) or cls(value)


_CALIBRATOR_ALIASES: Final = {
    "uc": CalibratorKind.UNCALIBRATED,
    "ts": CalibratorKind.GLOBAL_TS,
}


class SplitRole(IntEnum):
    SEGMENTATION_TRAIN = 1
    CALIBRATION_TRAIN = 2
    INTRA_DOMAIN_TEST = 3


_deco_options = {"frozen": True, "eq": False}
if sys.version_info >= (3, 10):
    _deco_options["slots"] = True


class ValidationError(ValueError):
    pass


class NonFiniteError(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class TensorFormatError(ValueError):
    pass


class EmptyRegion(ValueError):
    pass


class PolicyError(ValueError):
    pass


class ConfigError(ValueError):
    key = None

    def __init__(self, *args, key: Optional[str] = None):
        self.key = key
        super().__init__(*args)


class DegenerateGeometry(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    stage = None
    epoch = None

    def __init__(self, *args, stage: str, epoch: int):
        self.stage = stage
        self.epoch = epoch
        super().__init__(*args)


class MissingArtifacts(FileNotFoundError):
    missing = ()

    def __init__(self, *args, missing):
        self.missing = tuple(str(m) for m in missing)
        super().__init__(*args)

    def __str__(self):
        return "%s: %s" % (super().__str__(), ", ".join(self.missing))


class StageFailed(RuntimeError):
    stage = None

    def __init__(self, *args, stage: str):
        self.stage = stage
        super().__init__(*args)

    def __str__(self):
        return "[%s] %s" % (self.stage, super().__str__())


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(
            "%s contains %d non-finite values" % (what, int(np.sum(~np.isfinite(arr))))
        )


def _check_ndim(arr: np.ndarray, ndim: int, what: str):
    if arr.ndim != ndim:
        raise ShapeMismatch(f"{what} needs {ndim} dimensions, got shape {arr.shape}")


@dataclass(**_deco_options)
class ImageSlice:
    data: np.ndarray
    case_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _check_ndim(self.data, 3, "image")
        if self.data.shape[0] != 1:
            raise ShapeMismatch(f"image must be single channel, got {self.data.shape}")
        _check_finite(self.data, "image")

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    def replace(self, data) -> "ImageSlice":
        return ImageSlice(data, case_id=self.case_id, slice_index=self.slice_index)


@dataclass(**_deco_options)
class LabelMap:
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _check_ndim(self.data, 3, "label")
        if self.data.shape[0] < 2:
            raise ShapeMismatch("label needs at least two classes")
        if not np.all((self.data == 0) | (self.data == 1)):
            raise ValidationError("label entries must be 0 or 1")
        if not np.all(self.data.sum(axis=0) == 1):
            raise ValidationError("label is not one-hot")

    @classmethod
    def from_indices(cls, indices, num_classes: int) -> "LabelMap":
        indices = np.asarray(indices)
        if indices.min() < 0 or indices.max() >= num_classes:
            raise ValidationError("class index out of range")
        onehot = (np.arange(num_classes)[:, None, None] == indices[None]).astype(
            np.float32
        )
        return cls(onehot)

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    @property
    def indices(self) -> np.ndarray:
        return np.argmax(self.data, axis=0)


@dataclass(**_deco_options)
class LogitMap:
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _check_ndim(self.data, 3, "logits")
        _check_finite(self.data, "logits")

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]


@dataclass(**_deco_options)
class ProbabilityMap:
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _check_ndim(self.data, 3, "probabilities")
        _check_finite(self.data, "probabilities")
        if self.data.min() < 0 or self.data.max() > 1:
            raise ValidationError("probabilities outside [0, 1]")
        deviation = np.abs(self.data.sum(axis=0, dtype=np.float64) - 1).max()
        if deviation > PROBABILITY_TOLERANCE:
            raise ValidationError(
                f"channel sums deviate from 1 by {deviation:.3g}"
            )

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    @property
    def prediction(self) -> np.ndarray:
        # np.argmax picks the lowest index on ties
        return np.argmax(self.data, axis=0)

    @property
    def confidence(self) -> np.ndarray:
        return self.data.max(axis=0)


@dataclass(**_deco_options)
class TemperatureMap:
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _check_ndim(self.data, 3, "temperature")
        # one channel shared by all classes keeps the argmax untouched
        if self.data.shape[0] != 1:
            raise ShapeMismatch("temperature map must have exactly one channel")
        _check_finite(self.data, "temperature")
        if not np.all(self.data > 0):
            raise ValidationError("temperature must be strictly positive")

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]


@dataclass(**_deco_options)
class ShapeResidual:
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data))
        _check_ndim(self.data, 3, "shape residual")
        _check_finite(self.data, "shape residual")
        if self.data.min() < -1 or self.data.max() > 1:
            raise ValidationError("shape residual outside [-1, 1]")


@dataclass(**_deco_options)
class SusceptibilityEstimate:
    mu: np.ndarray
    var: np.ndarray
    n_aug: int

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen(self.mu))
        object.__setattr__(self, "var", _frozen(self.var))
        if self.n_aug < 1:
            raise ValidationError("n_aug must be at least 1")
        if self.mu.shape != self.var.shape:
            raise ShapeMismatch("mean and variance shapes differ")
        _check_finite(self.mu, "logit mean")
        _check_finite(self.var, "logit variance")
        if np.any(self.var < 0):
            raise ValidationError("variance must be non-negative")


@dataclass(**_deco_options)
class DatasetSplit:
    train: tuple
    validation: tuple
    test: tuple

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        seen = set()
        for part in (self.train, self.validation, self.test):
            if seen.intersection(part) or len(set(part)) != len(part):
                raise ValidationError("split parts must be pairwise disjoint")
            seen.update(part)

    @property
    def roles(self) -> dict:
        return {
            SplitRole.SEGMENTATION_TRAIN: self.train,
            SplitRole.CALIBRATION_TRAIN: self.validation,
            SplitRole.INTRA_DOMAIN_TEST: self.test,
        }

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
            "roles": {
                role.name.lower(): name
                for role, name in zip(
                    SplitRole, ("train", "validation", "test")
                )
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSplit":
        return cls(data["train"], data["validation"], data["test"])


@functools.lru_cache(maxsize=1)
def get_OODCAL_DEVICE() -> str:
    return getattr(settings, "OODCAL_DEVICE", "cpu")


@functools.lru_cache(maxsize=1)
def get_OODCAL_CACHE() -> str:
    return getattr(settings, "OODCAL_CACHE", "default")


@functools.lru_cache(maxsize=1)
def get_OODCAL_NUM_THREADS() -> Optional[int]:
    return getattr(settings, "OODCAL_NUM_THREADS", None)
