__all__ = [
    "SegModelConfig",
    "UNet",
    "FrozenModel",
    "train_segmenter",
    "forward",
    "forward_batch",
    "freeze",
    "model_fingerprint",
    "save_checkpoint",
    "load_checkpoint",
    "stack_images",
    "stack_labels",
]

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._core import derive_seed, make_rng, package_version, seed_everything, stable_digest
from .augment import AugmentationPolicy, apply_augmentation, sample_params
from .misc import (
    ImageSlice,
    LogitMap,
    ShapeMismatch,
    TrainingDiverged,
    ValidationError,
    get_OODCAL_DEVICE,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegModelConfig:
    depth: int = 3
    base_channels: int = 16
    class_count: int = 4
    in_channels: int = 1
    seed: int = 0
    # encoder dropout, used by the shape prior variant only
    encoder_dropout: float = 0.0

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.class_count < 2:
            raise ValidationError("depth >= 1, base_channels >= 1, class_count >= 2 required")
        if not 0 <= self.encoder_dropout < 1:
            raise ValidationError("encoder_dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """
    U-Net with depth resolution levels.

    Spatial dropout after every encoder block when encoder_dropout > 0; it is
    active in train() mode only.
    """

    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        widths = [config.base_channels * 2**i for i in range(config.depth)]
        self.encoders = nn.ModuleList()
        in_ch = config.in_channels
        for width in widths:
            self.encoders.append(_conv_block(in_ch, width))
            in_ch = width
        self.dropout = nn.Dropout2d(config.encoder_dropout)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for width in reversed(widths[:-1]):
            self.ups.append(nn.ConvTranspose2d(width * 2, width, kernel_size=2, stride=2))
            self.decoders.append(_conv_block(width * 2, width))
        self.head = nn.Conv2d(widths[0], config.class_count, kernel_size=1)

    @property
    def divisor(self) -> int:
        return 2 ** (self.config.depth - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatch(
                f"expected (B, {self.config.in_channels}, M, N) input, got {tuple(x.shape)}"
            )
        if x.shape[-1] % self.divisor or x.shape[-2] % self.divisor:
            raise ShapeMismatch(
                f"spatial size {tuple(x.shape[-2:])} not divisible by {self.divisor}"
            )
        skips = []
        for i, encoder in enumerate(self.encoders):
            if i:
                x = F.max_pool2d(x, 2)
            x = encoder(x)
            if self.config.encoder_dropout:
                x = self.dropout(x)
            skips.append(x)
        x = skips.pop()
        for up, decoder in zip(self.ups, self.decoders):
            x = decoder(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


@dataclass
class FrozenModel:
    """a trained network in eval mode with gradients disabled"""

    net: nn.Module
    config: object
    history: list = field(default_factory=list)

    def __post_init__(self):
        freeze(self.net)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    @property
    def fingerprint(self) -> str:
        return model_fingerprint(self.net)


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for param in net.parameters():
        param.requires_grad_(False)
    return net


def model_fingerprint(net: nn.Module) -> str:
    state = net.state_dict()
    parts = []
    for name in sorted(state):
        parts.extend([name, state[name].detach().cpu().numpy()])
    return stable_digest(*parts)


def _device() -> torch.device:
    return torch.device(get_OODCAL_DEVICE())


def stack_images(images: Sequence[ImageSlice]) -> torch.Tensor:
    return torch.tensor(np.stack([x.data for x in images]), dtype=torch.float32)


def stack_labels(labels) -> torch.Tensor:
    return torch.tensor(np.stack([y.indices for y in labels]), dtype=torch.long)


@torch.no_grad()
def forward_batch(model, images: torch.Tensor) -> torch.Tensor:
    net = model.net if isinstance(model, FrozenModel) else model
    if isinstance(net, nn.Module):
        net.eval()
        param = next(iter(net.parameters()), None)
        if param is not None:
            images = images.to(device=param.device, dtype=param.dtype)
        return net(images).cpu()
    return model(images)


def forward(model, x: ImageSlice) -> LogitMap:
    """z = f(x): deterministic logits of shape C x M x N"""
    logits = forward_batch(model, stack_images([x]))[0]
    return LogitMap(logits.numpy().astype(np.float64))


def _augmented_batch(pairs, indices, policy, seed, epoch):
    images, labels = [], []
    for i in indices:
        x, y = pairs[i]
        if policy is not None and policy.enabled:
            params = sample_params(policy, derive_seed(seed, "epoch", epoch, int(i)))
            x, y = apply_augmentation(x, y, params)
        images.append(x)
        labels.append(y)
    return stack_images(images), stack_labels(labels)


def check_loss(loss: torch.Tensor, stage: str, epoch: int):
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"loss became {loss.item()} in epoch {epoch}", stage=stage, epoch=epoch
        )


@torch.no_grad()
def _mean_loss(net, pairs, batch_size, loss_fn) -> float:
    net.eval()
    total, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        images = stack_images([x for x, _ in chunk])
        labels = stack_labels([y for _, y in chunk])
        device = next(net.parameters()).device
        total += loss_fn(net(images.to(device)), labels.to(device)).item() * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def train_segmenter(
    train_pairs: Sequence,
    val_pairs: Sequence,
    policy: Optional[AugmentationPolicy] = None,
    epochs: int = 100,
    lr: float = 1e-3,
    config: SegModelConfig = SegModelConfig(),
    batch_size: int = 8,
    log_every: int = 10,
    loss_fn: Callable = F.cross_entropy,
    min_steps: int = 16,
) -> FrozenModel:
    """
    Cross-entropy training with the full augmentation policy.

    An epoch is at least one pass over the training slices and at least
    `min_steps` optimiser steps.

    The checkpoint with the lowest validation loss is retained; without
    validation pairs the last epoch is kept.
    """
    if not train_pairs:
        raise ValidationError("no training slices")
    if min_steps < 1:
        raise ValidationError("min_steps >= 1 required")
    train_ids = {(x.case_id, x.slice_index) for x, _ in train_pairs}
    if any((x.case_id, x.slice_index) in train_ids for x, _ in val_pairs):
        raise ValidationError("training and validation slices overlap")
    seed_everything(derive_seed("segnet", config.seed))
    device = _device()
    net = UNet(config).to(device)
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    rng = make_rng("segnet-order", config.seed)
    best_state, best_loss = None, math.inf
    history = []
    for epoch in range(epochs):
        net.train()
        epoch_loss, seen, steps, repeat = 0.0, 0, 0, 0
        # small training sets are cycled until min_steps optimiser steps are taken
        while steps < min_steps:
            order = rng.permutation(len(train_pairs))
            for start in range(0, len(order), batch_size):
                images, labels = _augmented_batch(
                    train_pairs,
                    order[start : start + batch_size],
                    policy,
                    config.seed,
                    (epoch, repeat),
                )
                optimizer.zero_grad()
                loss = loss_fn(net(images.to(device)), labels.to(device))
                check_loss(loss, "train_seg", epoch)
                loss.backward()
                optimizer.step()
                epoch_loss += loss.item() * len(images)
                seen += len(images)
                steps += 1
            repeat += 1
        record = {"epoch": epoch, "train_loss": epoch_loss / seen, "steps": steps}
        if val_pairs:
            record["val_loss"] = _mean_loss(net, val_pairs, batch_size, loss_fn)
            if record["val_loss"] < best_loss:
                best_loss = record["val_loss"]
                best_state = copy.deepcopy(net.state_dict())
        history.append(record)
        if log_every and (epoch % log_every == 0 or epoch == epochs - 1):
            logger.info("segmenter epoch %d: %s", epoch, record)
    if best_state is not None:
        net.load_state_dict(best_state)
    return FrozenModel(net, config, history)


def save_checkpoint(path, model: FrozenModel, **tags) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), path / "weights.pt")
    meta = {
        "config": model.config.to_dict(),
        "config_type": type(model.config).__name__,
        "history": model.history,
        "fingerprint": model.fingerprint,
        "version": package_version(),
        "tags": tags,
    }
    (path / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
    return path


def load_checkpoint(path, build: Callable, config_type=SegModelConfig) -> FrozenModel:
    """build(config) -> nn.Module; weights are loaded onto the configured device"""
    path = Path(path)
    meta = json.loads((path / "checkpoint.json").read_text())
    config = config_type(**_tuplify(meta["config"]))
    net = build(config)
    state = torch.load(path / "weights.pt", map_location=_device())
    net.load_state_dict(state)
    return FrozenModel(net.to(_device()), config, meta.get("history", []))


def _tuplify(data: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
