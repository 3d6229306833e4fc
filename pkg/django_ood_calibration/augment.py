__all__ = [
    "PHOTOMETRIC",
    "GEOMETRIC",
    "ALL_TRANSFORMS",
    "AugmentationPolicy",
    "AugParams",
    "sample_params",
    "apply_photometric",
    "apply_geometric",
    "apply_augmentation",
]

import logging
from dataclasses import asdict, dataclass, replace
from typing import Final, Optional

import numpy as np
from scipy import ndimage

from ._core import make_rng
from .misc import ImageSlice, LabelMap, PolicyError, ValidationError

logger = logging.getLogger(__name__)

PHOTOMETRIC: Final = frozenset(["brightness", "contrast", "gamma", "noise"])
GEOMETRIC: Final = frozenset(["affine", "elastic"])
ALL_TRANSFORMS: Final = PHOTOMETRIC | GEOMETRIC

# (field, identity value); every range has to contain its identity
_IDENTITY_RANGES: Final = (
    ("brightness", 0.0),
    ("contrast", 1.0),
    ("gamma", 1.0),
    ("noise_std", 0.0),
    ("rotation", 0.0),
    ("scale", 1.0),
    ("translation", 0.0),
)


@dataclass(frozen=True)
class AugmentationPolicy:
    brightness: tuple = (-0.1, 0.1)
    contrast: tuple = (0.8, 1.2)
    gamma: tuple = (0.7, 1.4)
    noise_std: tuple = (0.0, 0.05)
    # degrees
    rotation: tuple = (-15.0, 15.0)
    scale: tuple = (0.9, 1.1)
    # pixels at 128 px, scaled with the slice size
    translation: tuple = (-5.0, 5.0)
    elastic_std: float = 1.5
    elastic_spacing: int = 16
    enabled: frozenset = ALL_TRANSFORMS

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        unknown = self.enabled - ALL_TRANSFORMS
        if unknown:
            # corruption kinds and anything else are not augmentations
            raise PolicyError(f"unknown transforms in policy: {sorted(unknown)}")
        for name, identity in _IDENTITY_RANGES:
            value = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != 2 or not value[0] <= identity <= value[1]:
                raise ValidationError(f"{name} range {value} must contain {identity}")
        if self.noise_std[0] < 0 or self.scale[0] <= 0 or self.gamma[0] <= 0:
            raise ValidationError("noise_std >= 0, scale > 0 and gamma > 0 required")
        if self.elastic_std < 0 or self.elastic_spacing < 2:
            raise ValidationError("elastic_std >= 0 and elastic_spacing >= 2 required")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(enabled=frozenset())

    @property
    def is_photometric_only(self) -> bool:
        return not (self.enabled & GEOMETRIC)

    def photometric_only(self) -> "AugmentationPolicy":
        return replace(self, enabled=self.enabled & PHOTOMETRIC)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["enabled"] = sorted(self.enabled)
        return data


@dataclass(frozen=True)
class AugParams:
    brightness: float = 0.0
    contrast: float = 1.0
    gamma: float = 1.0
    noise_std: float = 0.0
    noise_seed: int = 0
    rotation: float = 0.0
    scale: float = 1.0
    translation: tuple = (0.0, 0.0)
    elastic_std: float = 0.0
    elastic_spacing: int = 16
    elastic_seed: int = 0


def sample_params(policy: AugmentationPolicy, seed: int) -> AugParams:
    """independent draw per enabled transform; disabled transforms keep identity values"""
    rng = make_rng("augment", seed)
    # draw everything so the stream does not depend on the enabled set
    brightness = rng.uniform(*policy.brightness)
    contrast = rng.uniform(*policy.contrast)
    gamma = rng.uniform(*policy.gamma)
    noise_std = rng.uniform(*policy.noise_std)
    rotation = rng.uniform(*policy.rotation)
    scale = rng.uniform(*policy.scale)
    translation = rng.uniform(policy.translation[0], policy.translation[1], 2)
    noise_seed, elastic_seed = (int(s) for s in rng.integers(0, 2**31, 2))
    enabled = policy.enabled
    return AugParams(
        brightness=float(brightness) if "brightness" in enabled else 0.0,
        contrast=float(contrast) if "contrast" in enabled else 1.0,
        gamma=float(gamma) if "gamma" in enabled else 1.0,
        noise_std=float(noise_std) if "noise" in enabled else 0.0,
        noise_seed=noise_seed,
        rotation=float(rotation) if "affine" in enabled else 0.0,
        scale=float(scale) if "affine" in enabled else 1.0,
        translation=tuple(float(t) for t in translation)
        if "affine" in enabled
        else (0.0, 0.0),
        elastic_std=policy.elastic_std if "elastic" in enabled else 0.0,
        elastic_spacing=policy.elastic_spacing,
        elastic_seed=elastic_seed,
    )


def apply_photometric(x: ImageSlice, params: AugParams) -> ImageSlice:
    """
    contrast around the slice mean, brightness shift, gamma, additive noise, clip

    Steps whose parameter is the identity are skipped, so identity parameters
    pass the image through bit for bit.
    """
    image = x.data.astype(np.float64)
    if params.contrast != 1.0:
        mean = image.mean()
        image = (image - mean) * params.contrast + mean
    if params.brightness != 0.0:
        image = image + params.brightness
    if params.gamma != 1.0:
        image = np.clip(image, 0.0, 1.0) ** params.gamma
    if params.noise_std > 0.0:
        rng = np.random.default_rng(params.noise_seed)
        image = image + rng.normal(0.0, params.noise_std, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return x.replace(image.astype(x.data.dtype))


def _elastic_field(shape, params: AugParams) -> Optional[np.ndarray]:
    if params.elastic_std <= 0:
        return None
    rng = np.random.default_rng(params.elastic_seed)
    coarse_shape = tuple(max(2, -(-s // params.elastic_spacing) + 1) for s in shape)
    coarse = rng.normal(0.0, params.elastic_std, (2,) + coarse_shape)
    zoom = [s / c for s, c in zip(shape, coarse_shape)]
    # smooth displacement by cubic upsampling of the control grid
    return np.stack([ndimage.zoom(c, zoom, order=3)[: shape[0], : shape[1]] for c in coarse])


def _sample_coordinates(shape, params: AugParams) -> Optional[np.ndarray]:
    """inverse map: output pixel p reads input at c + R(-theta)(p - c - t) / s"""
    rows, cols = shape
    identity_affine = (
        params.rotation == 0.0 and params.scale == 1.0 and params.translation == (0.0, 0.0)
    )
    displacement = _elastic_field(shape, params)
    if identity_affine and displacement is None:
        return None
    center = np.array([(rows - 1) / 2, (cols - 1) / 2])[:, None, None]
    grid = np.mgrid[0:rows, 0:cols].astype(np.float64)
    shift = np.array(params.translation)[:, None, None] * rows / 128
    theta = np.deg2rad(params.rotation)
    cos, sin = np.cos(theta), np.sin(theta)
    rel = grid - center - shift
    coords = np.stack(
        [cos * rel[0] + sin * rel[1], -sin * rel[0] + cos * rel[1]]
    ) / params.scale + center
    if displacement is not None:
        coords = coords + displacement
    return coords


def apply_geometric(x: ImageSlice, y: LabelMap, params: AugParams):
    """
    Warp image (bilinear) and label (nearest) with the same spatial transform.

    Returns (ImageSlice, LabelMap); the label stays one-hot.
    """
    if x.shape != y.shape:
        raise ValidationError("image and label are not paired")
    coords = _sample_coordinates(x.shape, params)
    if coords is None:
        return x, y
    image = ndimage.map_coordinates(x.data[0].astype(np.float64), coords, order=1, mode="nearest")
    labels = ndimage.map_coordinates(y.indices, coords, order=0, mode="nearest")
    return (
        x.replace(np.clip(image, 0.0, 1.0)[None].astype(x.data.dtype)),
        LabelMap.from_indices(labels, y.num_classes),
    )


def apply_augmentation(x: ImageSlice, y: LabelMap, params: AugParams):
    """the training pipeline: geometric warp first, then photometric transforms"""
    x, y = apply_geometric(x, y, params)
    return apply_photometric(x, params), y
