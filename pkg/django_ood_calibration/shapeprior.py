"""
denoising-autoencoder shape prior s_psi over segmentation logits
"""

__all__ = [
    "ShapePriorConfig",
    "build_shape_prior",
    "shape_prior_loss",
    "noisy_label_logits",
    "train_shape_prior",
    "shape_residual",
    "shape_residual_tensor",
    "cached_shape_residual",
]

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from ._cache import cached_arrays
from ._core import derive_seed, make_rng, seed_everything
from .augment import AugmentationPolicy
from .misc import (
    LogitMap,
    ProbabilityMap,
    ShapeResidual,
    ValidationError,
    get_OODCAL_DEVICE,
)
from .segnet import (
    FrozenModel,
    SegModelConfig,
    UNet,
    _augmented_batch,
    check_loss,
    forward_batch,
    model_fingerprint,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShapePriorConfig:
    depth: int = 2
    base_channels: int = 8
    class_count: int = 4
    dropout: float = 0.5
    epochs: int = 800
    lr: float = 1e-3
    batch_size: int = 8
    # share of each batch fed with salt-and-pepper label logits instead of f(x)
    synthetic_fraction: float = 0.5
    flip_rate: float = 0.05
    logit_scale: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.dropout < 1:
            raise ValidationError("encoder dropout must be in (0, 1)")
        if not 0 <= self.synthetic_fraction <= 1 or not 0 <= self.flip_rate < 1:
            raise ValidationError("synthetic_fraction and flip_rate must be fractions")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def network(self) -> SegModelConfig:
        return SegModelConfig(
            depth=self.depth,
            base_channels=self.base_channels,
            class_count=self.class_count,
            in_channels=self.class_count,
            seed=self.seed,
            encoder_dropout=self.dropout,
        )


def build_shape_prior(config: ShapePriorConfig) -> UNet:
    return UNet(config.network)


def shape_prior_loss(output_logits: torch.Tensor, target_onehot: torch.Tensor) -> torch.Tensor:
    """-(1/MN) sum_{m,n} sum_c y log softmax(s(z)), averaged over the batch"""
    log_prob = torch.log_softmax(output_logits, dim=-3)
    return -(target_onehot * log_prob).sum(dim=-3).mean()


def noisy_label_logits(
    labels: torch.Tensor, num_classes: int, flip_rate: float, scale: float, generator
) -> torch.Tensor:
    """logits +-scale from labels with a flip_rate share of pixels set to a random class"""
    flips = torch.rand(labels.shape, generator=generator) < flip_rate
    random_labels = torch.randint(0, num_classes, labels.shape, generator=generator)
    noisy = torch.where(flips, random_labels, labels)
    onehot = nn.functional.one_hot(noisy, num_classes).permute(0, 3, 1, 2).float()
    return scale * (2 * onehot - 1)


def train_shape_prior(
    segmenter,
    val_pairs: Sequence,
    config: ShapePriorConfig = ShapePriorConfig(),
    policy: Optional[AugmentationPolicy] = None,
    log_every: int = 50,
) -> FrozenModel:
    """
    Fit s_psi on the calibration split with encoder dropout active.

    Inputs are the frozen segmenter's logits (computed without gradient) and,
    for a synthetic_fraction of each batch, salt-and-pepper label logits.
    """
    if not val_pairs:
        raise ValidationError("the shape prior needs calibration slices")
    seed_everything(derive_seed("shapeprior", config.seed))
    device = torch.device(get_OODCAL_DEVICE())
    net = build_shape_prior(config).to(device)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = make_rng("shapeprior-order", config.seed)
    generator = torch.Generator().manual_seed(derive_seed("shapeprior-noise", config.seed))
    history = []
    for epoch in range(config.epochs):
        net.train()
        order = rng.permutation(len(val_pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            images, labels = _augmented_batch(
                val_pairs, order[start : start + config.batch_size], policy, config.seed, epoch
            )
            logits = forward_batch(segmenter, images)
            synthetic = torch.rand(len(labels), generator=generator) < config.synthetic_fraction
            if synthetic.any():
                noisy = noisy_label_logits(
                    labels, config.class_count, config.flip_rate, config.logit_scale, generator
                )
                logits = torch.where(synthetic[:, None, None, None], noisy, logits)
            target = nn.functional.one_hot(labels, config.class_count).permute(0, 3, 1, 2).float()
            optimizer.zero_grad()
            loss = shape_prior_loss(net(logits.to(device)), target.to(device))
            check_loss(loss, "train_shape", epoch)
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(labels)
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(val_pairs)})
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            logger.info("shape prior epoch %d: %s", epoch, history[-1])
    return FrozenModel(net, config, history)


@torch.no_grad()
def shape_residual_tensor(shape_prior, logits: torch.Tensor):
    """(softmax(s(z)), softmax(s(z)) - softmax(z)) for a (B, C, M, N) batch"""
    prior = torch.softmax(forward_batch(shape_prior, logits), dim=-3)
    return prior, prior - torch.softmax(logits, dim=-3)


def shape_residual(shape_prior, z: LogitMap):
    """returns (ProbabilityMap of the denoised shape, ShapeResidual), evaluated in float64"""
    logits = torch.tensor(np.asarray(z.data, dtype=np.float64))[None]
    prior = torch.softmax(forward_batch(shape_prior, logits).to(torch.float64), dim=-3)
    residual = prior - torch.softmax(logits, dim=-3)
    return ProbabilityMap(prior[0].numpy()), ShapeResidual(residual[0].numpy().clip(-1, 1))


def cached_shape_residual(shape_prior, z: LogitMap, key_parts: tuple, store_dir=None,
                          fingerprint: Optional[str] = None):
    def _compute():
        prior, residual = shape_residual(shape_prior, z)
        return {"prior": prior.data, "residual": residual.data}

    arrays = cached_arrays(
        "shape_residual",
        (fingerprint or model_fingerprint(getattr(shape_prior, "net", shape_prior)),)
        + tuple(key_parts)
        + (z.data,),
        _compute,
        store_dir=store_dir,
    )
    return arrays["prior"], arrays["residual"]
