"""
calibration and segmentation metrics over a dilated region of interest
"""

__all__ = [
    "BinningConfig",
    "BinRecord",
    "CalibrationStats",
    "CalibrationReport",
    "dilated_roi",
    "accumulate",
    "ece",
    "sce",
    "mce",
    "dice",
    "entropy_map",
    "reliability_data",
    "confidence_histogram",
    "argmax_agreement",
]

import logging
from dataclasses import dataclass, field
from typing import Final, Optional, Union

import numpy as np
from scipy import ndimage, special

from .misc import EmptyRegion, LabelMap, ProbabilityMap, ShapeMismatch, ValidationError

logger = logging.getLogger(__name__)

ROI_KERNEL: Final = 10

label_type: Final = Union[LabelMap, np.ndarray]


@dataclass(frozen=True)
class BinningConfig:
    """
    num_bins equal-width bins; bin k covers (k / num_bins, (k + 1) / num_bins],
    confidence 0 falls into the first bin
    """

    num_bins: int = 15

    def __post_init__(self):
        if self.num_bins < 1:
            raise ValidationError("num_bins must be positive")

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.num_bins + 1) / self.num_bins

    def assign(self, confidence: np.ndarray) -> np.ndarray:
        index = np.searchsorted(self.edges, confidence, side="left") - 1
        return np.clip(index, 0, self.num_bins - 1)


@dataclass(frozen=True)
class BinRecord:
    lower: float
    upper: float
    count: int
    confidence: float
    accuracy: float

    @property
    def gap(self) -> float:
        return abs(self.accuracy - self.confidence)


def _indices(y: label_type) -> np.ndarray:
    if isinstance(y, LabelMap):
        return y.indices
    return np.asarray(y, dtype=np.int64)


def dilated_roi(y: label_type, kernel: int = ROI_KERNEL) -> np.ndarray:
    """binary dilation of the foreground (every class but 0) with a kernel x kernel square"""
    foreground = _indices(y) != 0
    if not foreground.any():
        return foreground
    return ndimage.binary_dilation(foreground, structure=np.ones((kernel, kernel), dtype=bool))


def _roi_pixels(p: ProbabilityMap, labels: np.ndarray, roi: Optional[np.ndarray]):
    if labels.shape != p.shape:
        raise ShapeMismatch(f"probabilities {p.shape} and labels {labels.shape} differ")
    if roi is None:
        roi = np.ones(p.shape, dtype=bool)
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != p.shape:
        raise ShapeMismatch(f"roi {roi.shape} and probabilities {p.shape} differ")
    return np.asarray(p.data, dtype=np.float64)[:, roi], labels[roi]


@dataclass
class CalibrationStats:
    """
    Sufficient statistics of ECE, SCE, MCE and Dice.

    Per-slice statistics merge into pooled ones by addition, so pooled metrics
    weight every ROI pixel of every slice equally.
    """

    num_bins: int
    num_classes: int
    counts: np.ndarray = None
    confidence_sum: np.ndarray = None
    accuracy_sum: np.ndarray = None
    class_counts: np.ndarray = None
    class_confidence_sum: np.ndarray = None
    class_accuracy_sum: np.ndarray = None
    # dice counts over the whole slice, not only the roi
    intersection: np.ndarray = None
    predicted: np.ndarray = None
    target: np.ndarray = None
    slices: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        bins, classes = self.num_bins, self.num_classes
        for name, shape in (
            ("counts", (bins,)),
            ("confidence_sum", (bins,)),
            ("accuracy_sum", (bins,)),
            ("class_counts", (classes, bins)),
            ("class_confidence_sum", (classes, bins)),
            ("class_accuracy_sum", (classes, bins)),
            ("intersection", (classes,)),
            ("predicted", (classes,)),
            ("target", (classes,)),
        ):
            value = getattr(self, name)
            value = np.zeros(shape) if value is None else np.asarray(value, dtype=np.float64)
            if value.shape != shape:
                raise ShapeMismatch(f"{name} needs shape {shape}, got {value.shape}")
            setattr(self, name, value)

    @property
    def roi_pixels(self) -> int:
        return int(self.counts.sum())

    def _check_nonempty(self):
        if not self.roi_pixels:
            raise EmptyRegion("no pixels inside the region of interest")

    def update(
        self, p: ProbabilityMap, y: label_type, roi=None, binning=None
    ) -> "CalibrationStats":
        binning = binning or BinningConfig(self.num_bins)
        if binning.num_bins != self.num_bins:
            raise ValidationError("binning does not match the accumulator")
        if p.data.shape[0] != self.num_classes:
            raise ShapeMismatch(f"expected {self.num_classes} classes, got {p.data.shape[0]}")
        labels = _indices(y)
        probs, roi_labels = _roi_pixels(p, labels, roi)
        bins = self.num_bins
        prediction = np.argmax(probs, axis=0)
        confidence = probs.max(axis=0)
        correct = (prediction == roi_labels).astype(np.float64)
        index = binning.assign(confidence)
        self.counts += np.bincount(index, minlength=bins)
        self.confidence_sum += np.bincount(index, weights=confidence, minlength=bins)
        self.accuracy_sum += np.bincount(index, weights=correct, minlength=bins)
        for c in range(self.num_classes):
            class_index = binning.assign(probs[c])
            hits = (roi_labels == c).astype(np.float64)
            self.class_counts[c] += np.bincount(class_index, minlength=bins)
            self.class_confidence_sum[c] += np.bincount(
                class_index, weights=probs[c], minlength=bins
            )
            self.class_accuracy_sum[c] += np.bincount(class_index, weights=hits, minlength=bins)
        full_prediction = p.prediction
        for c in range(self.num_classes):
            pred_c, target_c = full_prediction == c, labels == c
            self.intersection[c] += np.sum(pred_c & target_c)
            self.predicted[c] += np.sum(pred_c)
            self.target[c] += np.sum(target_c)
        self.slices += 1
        return self

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        if (other.num_bins, other.num_classes) != (self.num_bins, self.num_classes):
            raise ValidationError("cannot merge statistics of different binning or classes")
        merged = CalibrationStats(self.num_bins, self.num_classes, metadata=dict(self.metadata))
        for name in _ARRAY_FIELDS:
            setattr(merged, name, getattr(self, name) + getattr(other, name))
        merged.slices = self.slices + other.slices
        return merged

    def __add__(self, other: "CalibrationStats") -> "CalibrationStats":
        return self.merge(other)

    @property
    def ece(self) -> float:
        self._check_nonempty()
        return float(np.abs(self.accuracy_sum - self.confidence_sum).sum() / self.roi_pixels)

    @property
    def mce(self) -> float:
        self._check_nonempty()
        populated = self.counts > 0
        gaps = np.abs(self.accuracy_sum - self.confidence_sum)[populated] / self.counts[populated]
        return float(gaps.max())

    @property
    def sce(self) -> float:
        self._check_nonempty()
        per_class = np.abs(self.class_accuracy_sum - self.class_confidence_sum).sum(axis=1)
        return float(per_class.sum() / (self.num_classes * self.roi_pixels))

    @property
    def dice(self) -> np.ndarray:
        denominator = self.predicted + self.target
        with np.errstate(invalid="ignore", divide="ignore"):
            score = 2 * self.intersection / denominator
        # a class absent from prediction and label scores 1
        return np.where(denominator == 0, 1.0, score)

    def reliability(self) -> list:
        edges = BinningConfig(self.num_bins).edges
        records = []
        for k in range(self.num_bins):
            count = int(self.counts[k])
            records.append(
                BinRecord(
                    lower=float(edges[k]),
                    upper=float(edges[k + 1]),
                    count=count,
                    confidence=float(self.confidence_sum[k] / count) if count else 0.0,
                    accuracy=float(self.accuracy_sum[k] / count) if count else 0.0,
                )
            )
        return records

    def to_dict(self) -> dict:
        data = {name: getattr(self, name).tolist() for name in _ARRAY_FIELDS}
        data.update(
            num_bins=self.num_bins,
            num_classes=self.num_classes,
            slices=self.slices,
            metadata=self.metadata,
        )
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationStats":
        return cls(**data)


_ARRAY_FIELDS: Final = (
    "counts",
    "confidence_sum",
    "accuracy_sum",
    "class_counts",
    "class_confidence_sum",
    "class_accuracy_sum",
    "intersection",
    "predicted",
    "target",
)


def accumulate(
    p: ProbabilityMap,
    y: label_type,
    roi=None,
    binning: BinningConfig = BinningConfig(),
    **metadata,
) -> CalibrationStats:
    stats = CalibrationStats(binning.num_bins, p.data.shape[0], metadata=metadata)
    return stats.update(p, y, roi, binning)


def ece(
    p: ProbabilityMap, y: label_type, roi=None, binning: BinningConfig = BinningConfig()
) -> float:
    """sum_k (n_k / n) |acc_k - conf_k| over the roi pixels"""
    return accumulate(p, y, roi, binning).ece


def sce(
    p: ProbabilityMap, y: label_type, roi=None, binning: BinningConfig = BinningConfig()
) -> float:
    """class-conditional ece: confidence p(c), correctness (label == c), averaged over classes"""
    return accumulate(p, y, roi, binning).sce


def mce(
    p: ProbabilityMap, y: label_type, roi=None, binning: BinningConfig = BinningConfig()
) -> float:
    """largest |acc_k - conf_k| over the populated bins"""
    return accumulate(p, y, roi, binning).mce


def dice(prediction: np.ndarray, y: label_type, num_classes: Optional[int] = None) -> np.ndarray:
    """per-class 2|A & B| / (|A| + |B|); 1 for a class absent from both"""
    prediction = np.asarray(prediction)
    labels = _indices(y)
    if prediction.shape != labels.shape:
        raise ShapeMismatch(f"prediction {prediction.shape} and labels {labels.shape} differ")
    if num_classes is None:
        if isinstance(y, LabelMap):
            num_classes = y.num_classes
        else:
            num_classes = int(max(prediction.max(), labels.max())) + 1
    scores = np.empty(num_classes)
    for c in range(num_classes):
        pred_c, target_c = prediction == c, labels == c
        total = pred_c.sum() + target_c.sum()
        scores[c] = 1.0 if total == 0 else 2.0 * np.sum(pred_c & target_c) / total
    return scores


def entropy_map(p: ProbabilityMap) -> np.ndarray:
    """-sum_c p log p in nats, 0 log 0 = 0"""
    return special.entr(np.asarray(p.data, dtype=np.float64)).sum(axis=0)


def reliability_data(
    p: ProbabilityMap, y: label_type, roi=None, binning: BinningConfig = BinningConfig()
) -> list:
    return accumulate(p, y, roi, binning).reliability()


def confidence_histogram(
    p: ProbabilityMap, roi=None, binning: BinningConfig = BinningConfig()
) -> np.ndarray:
    if roi is None:
        confidence = p.confidence
    else:
        roi = np.asarray(roi, dtype=bool)
        if roi.shape != p.shape:
            raise ShapeMismatch(f"roi {roi.shape} and probabilities {p.shape} differ")
        confidence = p.confidence[roi]
    return np.bincount(
        binning.assign(np.asarray(confidence, dtype=np.float64).ravel()),
        minlength=binning.num_bins,
    )


def argmax_agreement(p: ProbabilityMap, q: ProbabilityMap) -> float:
    """share of pixels whose argmax agrees"""
    if p.data.shape != q.data.shape:
        raise ShapeMismatch("probability maps differ in shape")
    return float(np.mean(p.prediction == q.prediction))


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    sce: float
    mce: float
    dice: tuple
    bins: tuple
    roi_pixels: int
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_stats(cls, stats: CalibrationStats, **metadata) -> "CalibrationReport":
        return cls(
            ece=stats.ece,
            sce=stats.sce,
            mce=stats.mce,
            dice=tuple(float(d) for d in stats.dice),
            bins=tuple(stats.reliability()),
            roi_pixels=stats.roi_pixels,
            metadata={**stats.metadata, **metadata},
        )

    @property
    def mean_foreground_dice(self) -> float:
        return float(np.mean(self.dice[1:])) if len(self.dice) > 1 else float(self.dice[0])

    def to_dict(self) -> dict:
        return {
            "ece": self.ece,
            "sce": self.sce,
            "mce": self.mce,
            "dice": list(self.dice),
            "bins": [
                {
                    "lower": b.lower,
                    "upper": b.upper,
                    "count": b.count,
                    "confidence": b.confidence,
                    "accuracy": b.accuracy,
                }
                for b in self.bins
            ],
            "roi_pixels": self.roi_pixels,
            "metadata": self.metadata,
        }
