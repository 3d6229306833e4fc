"""
temperature-map calibration network g_phi, its trainer and the baseline calibrators
"""

__all__ = [
    "BRANCHES",
    "CalibNetConfig",
    "SEBlock",
    "ResidualBlock",
    "TemperatureNet",
    "CalibrationInputs",
    "build_calibrator",
    "calibration_nll",
    "fit_temperature",
    "fit_global_ts",
    "train_calibrator",
    "fit_lts",
    "calibrate",
    "Calibrator",
    "UncalibratedCalibrator",
    "GlobalTemperatureCalibrator",
    "NetworkCalibrator",
    "AleaCalibrator",
    "save_calibrator",
    "load_calibrator",
]

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Final, Optional, Sequence

import numpy as np
import torch
from scipy import optimize, special
from torch import nn
from torch.nn import functional as F

from ._core import (
    derive_seed,
    make_rng,
    package_version,
    seed_everything,
    softmax,
    temperature_scale,
)
from .aleatoric import estimate_tensor
from .augment import AugmentationPolicy
from .misc import (
    CalibratorKind,
    ImageSlice,
    LogitMap,
    ProbabilityMap,
    ShapeMismatch,
    ShapeResidual,
    SusceptibilityEstimate,
    TemperatureMap,
    ValidationError,
    get_OODCAL_DEVICE,
)
from .segnet import (
    FrozenModel,
    _augmented_batch,
    check_loss,
    forward_batch,
    load_checkpoint,
    save_checkpoint,
    stack_images,
)
from .shapeprior import shape_residual_tensor

logger = logging.getLogger(__name__)

# branch order of the concatenated stem outputs
BRANCHES: Final = ("shape", "mu", "var", "logits", "image")
_SUSCEPTIBILITY_BRANCHES: Final = frozenset(["mu", "var"])

TEMPERATURE_BOUNDS: Final = (0.05, 20.0)


@dataclass(frozen=True)
class CalibNetConfig:
    class_count: int = 4
    stem_channels: int = 8
    fuse_channels: int = 16
    # squeeze ratio of the channel attention bottleneck
    reduction: int = 4
    num_blocks: int = 2
    epsilon: float = 1e-3
    epochs: int = 800
    lr: float = 1e-3
    batch_size: int = 8
    n_aug: int = 6
    use_susceptibility: bool = True
    use_shape: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValidationError("class_count >= 2 required")
        if min(self.stem_channels, self.fuse_channels, self.reduction) < 1:
            raise ValidationError("channel widths and reduction must be positive")
        if self.num_blocks < 0 or self.epsilon <= 0 or self.n_aug < 1:
            raise ValidationError("num_blocks >= 0, epsilon > 0 and n_aug >= 1 required")

    @property
    def branches(self) -> tuple:
        return tuple(
            name
            for name in BRANCHES
            if (self.use_shape or name != "shape")
            and (self.use_susceptibility or name not in _SUSCEPTIBILITY_BRANCHES)
        )

    @property
    def kind(self) -> CalibratorKind:
        if self.use_shape or self.use_susceptibility:
            return CalibratorKind.PROPOSED
        return CalibratorKind.LTS

    def branch_channels(self, name: str) -> int:
        return 1 if name == "image" else self.class_count

    def to_dict(self) -> dict:
        return asdict(self)


class SEBlock(nn.Module):
    """squeeze (global average pool) and excitation (bottleneck, sigmoid gates) over channels"""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        reduced = max(channels // reduction, 1)
        self.excitation = nn.Sequential(
            nn.Linear(channels, reduced),
            nn.ReLU(inplace=True),
            nn.Linear(reduced, channels),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gates = self.excitation(x.mean(dim=(-2, -1)))
        return x * gates[:, :, None, None]


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


def _inverse_softplus(value: float) -> float:
    return math.log(math.expm1(value))


class TemperatureNet(nn.Module):
    """
    One 3x3 conv stem per active branch, channel attention over the
    concatenated stems, a 1x1 fuse, residual blocks and a one-channel head.

    T = softplus(h) + epsilon, so T > 0 and is shared by all classes. The head
    starts at T = 1.
    """

    def __init__(self, config: CalibNetConfig):
        super().__init__()
        self.config = config
        self.stems = nn.ModuleDict(
            {
                name: nn.Sequential(
                    nn.Conv2d(
                        config.branch_channels(name),
                        config.stem_channels,
                        kernel_size=3,
                        padding=1,
                    ),
                    nn.ReLU(inplace=True),
                )
                for name in config.branches
            }
        )
        merged = config.stem_channels * len(config.branches)
        self.attention = SEBlock(merged, config.reduction)
        self.fuse = nn.Sequential(
            nn.Conv2d(merged, config.fuse_channels, kernel_size=1), nn.ReLU(inplace=True)
        )
        self.blocks = nn.Sequential(
            *(ResidualBlock(config.fuse_channels) for _ in range(config.num_blocks))
        )
        self.head = nn.Conv2d(config.fuse_channels, 1, kernel_size=1)
        nn.init.zeros_(self.head.weight)
        nn.init.constant_(self.head.bias, _inverse_softplus(1.0 - config.epsilon))

    def check_inputs(self, inputs: dict):
        missing = [name for name in self.config.branches if name not in inputs]
        if missing:
            raise ValidationError(f"missing calibration inputs: {missing}")
        reference = inputs["logits"].shape
        for name in self.config.branches:
            shape = inputs[name].shape
            expected = self.config.branch_channels(name)
            if len(shape) != 4 or shape[1] != expected:
                raise ShapeMismatch(f"{name} needs (B, {expected}, M, N), got {tuple(shape)}")
            if shape[0] != reference[0] or shape[-2:] != reference[-2:]:
                raise ShapeMismatch(
                    f"{name} {tuple(shape)} is not aligned with logits {tuple(reference)}"
                )

    def forward(self, inputs: dict) -> torch.Tensor:
        """inputs: branch name -> (B, channels, M, N); returns T as (B, 1, M, N)"""
        self.check_inputs(inputs)
        features = torch.cat(
            [self.stems[name](inputs[name]) for name in self.config.branches], dim=1
        )
        h = self.head(self.blocks(self.fuse(self.attention(features))))
        return F.softplus(h) + self.config.epsilon


def build_calibrator(config: CalibNetConfig) -> TemperatureNet:
    return TemperatureNet(config)


def calibration_nll(logits: torch.Tensor, temperature: torch.Tensor, target_onehot: torch.Tensor):
    """-(1/MN) sum_{m,n} sum_c y log softmax(z / T), averaged over the batch"""
    log_prob = torch.log_softmax(logits / temperature, dim=-3)
    return -(target_onehot * log_prob).sum(dim=-3).mean()


def fit_temperature(logits, labels, axis: int = -3, bounds=TEMPERATURE_BOUNDS) -> float:
    """
    Scalar T minimising the mean negative log likelihood of labels under
    softmax(logits / T), searched on bounds (bounded Brent).

    labels are class indices shaped like logits without the class axis.
    """
    logits = np.moveaxis(np.asarray(logits, dtype=np.float64), axis, -1)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise ShapeMismatch(f"logits {logits.shape} and labels {labels.shape} differ")
    logits = logits.reshape(-1, logits.shape[-1])
    labels = labels.reshape(-1, 1)

    def nll(t):
        log_prob = special.log_softmax(logits / t, axis=-1)
        return -np.take_along_axis(log_prob, labels, axis=-1).mean()

    result = optimize.minimize_scalar(
        nll, bounds=bounds, method="bounded", options={"xatol": 1e-5}
    )
    return float(result.x)


@torch.no_grad()
def _collect_logits(segmenter, pairs: Sequence, batch_size: int):
    logits, labels = [], []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        logits.append(forward_batch(segmenter, stack_images([x for x, _ in chunk])).numpy())
        labels.extend(y.indices for _, y in chunk)
    return np.concatenate(logits), np.stack(labels)


def fit_global_ts(segmenter, val_pairs: Sequence, batch_size: int = 8) -> float:
    """global temperature scaling: one T* for the whole validation split"""
    if not val_pairs:
        raise ValidationError("global temperature scaling needs calibration slices")
    logits, labels = _collect_logits(segmenter, val_pairs, batch_size)
    temperature = fit_temperature(logits, labels)
    logger.info("global temperature %.6f", temperature)
    return temperature


def _onehot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    return F.one_hot(labels, num_classes).permute(0, 3, 1, 2)


def _training_inputs(segmenter, shape_prior, images, config, alea_policy, seed) -> dict:
    logits = forward_batch(segmenter, images).float()
    inputs = {"logits": logits, "image": images}
    if config.use_susceptibility:
        inputs["mu"], inputs["var"] = estimate_tensor(
            segmenter, images, alea_policy, config.n_aug, seed
        )
    if config.use_shape:
        inputs["shape"] = shape_residual_tensor(shape_prior, logits)[1].float()
    return inputs


def train_calibrator(
    segmenter,
    shape_prior,
    val_pairs: Sequence,
    config: CalibNetConfig = CalibNetConfig(),
    policy: Optional[AugmentationPolicy] = None,
    log_every: int = 50,
) -> FrozenModel:
    """
    Fit g_phi on the calibration split; f_theta and s_psi stay frozen.

    Every iteration draws a fresh augmented batch from the full policy and
    recomputes (mu, var) from n_aug photometric copies of it.
    """
    if not val_pairs:
        raise ValidationError("the calibrator needs calibration slices")
    if config.use_shape and shape_prior is None:
        raise ValidationError("the shape branch needs a shape prior")
    policy = policy if policy is not None else AugmentationPolicy()
    alea_policy = policy.photometric_only()
    seed_everything(derive_seed("calibnet", config.seed))
    device = torch.device(get_OODCAL_DEVICE())
    net = build_calibrator(config).to(device)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = make_rng("calibnet-order", config.seed)
    history = []
    for epoch in range(config.epochs):
        net.train()
        order = rng.permutation(len(val_pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            images, labels = _augmented_batch(
                val_pairs, order[start : start + config.batch_size], policy, config.seed, epoch
            )
            inputs = _training_inputs(
                segmenter,
                shape_prior,
                images,
                config,
                alea_policy,
                derive_seed(config.seed, "calib-alea", epoch, start),
            )
            inputs = {name: value.to(device) for name, value in inputs.items()}
            target = _onehot(labels, config.class_count).float().to(device)
            optimizer.zero_grad()
            loss = calibration_nll(inputs["logits"], net(inputs), target)
            check_loss(loss, "train_calib", epoch)
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(labels)
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(val_pairs)})
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            logger.info("calibrator (%s) epoch %d: %s", config.kind.value, epoch, history[-1])
    return FrozenModel(net, config, history)


def fit_lts(
    segmenter,
    val_pairs: Sequence,
    config: CalibNetConfig = CalibNetConfig(),
    policy: Optional[AugmentationPolicy] = None,
    log_every: int = 50,
) -> FrozenModel:
    """local temperature scaling: the same network with only the logits and image branches"""
    config = replace(config, use_susceptibility=False, use_shape=False)
    return train_calibrator(segmenter, None, val_pairs, config, policy, log_every)


@dataclass(frozen=True)
class CalibrationInputs:
    """everything a calibrator may look at for one slice"""

    logits: LogitMap
    image: Optional[ImageSlice] = None
    susceptibility: Optional[SusceptibilityEstimate] = None
    residual: Optional[ShapeResidual] = None
    alea: Optional[ProbabilityMap] = None

    def __post_init__(self):
        shape = self.logits.shape
        classes = self.logits.data.shape[0]
        if self.image is not None and self.image.shape != shape:
            raise ShapeMismatch(f"image {self.image.shape} and logits {shape} differ")
        for name, grid in (
            ("mu", None if self.susceptibility is None else self.susceptibility.mu),
            ("var", None if self.susceptibility is None else self.susceptibility.var),
            ("residual", None if self.residual is None else self.residual.data),
            ("alea", None if self.alea is None else self.alea.data),
        ):
            if grid is not None and grid.shape != (classes,) + shape:
                raise ShapeMismatch(
                    f"{name} {grid.shape} is not aligned with logits {(classes,) + shape}"
                )

    def tensors(self, branches: Sequence, dtype=torch.float32, device=None) -> dict:
        grids = {"logits": self.logits.data}
        if self.image is not None:
            grids["image"] = self.image.data
        if self.susceptibility is not None:
            grids["mu"] = self.susceptibility.mu
            grids["var"] = self.susceptibility.var
        if self.residual is not None:
            grids["shape"] = self.residual.data
        missing = [name for name in branches if name not in grids]
        if missing:
            raise ValidationError(f"calibration inputs lack {missing}")
        return {
            name: torch.tensor(np.asarray(grids[name]), dtype=dtype, device=device)[None]
            for name in branches
        }


@torch.no_grad()
def calibrate(g, inputs: CalibrationInputs):
    """
    T = g(mu, var, residual, z, x) and softmax(z / T).

    Returns (TemperatureMap, ProbabilityMap); the per-pixel argmax equals the
    argmax of softmax(z).
    """
    net = g.net if isinstance(g, FrozenModel) else g
    net.eval()
    param = next(iter(net.parameters()))
    tensors = inputs.tensors(net.config.branches, dtype=param.dtype, device=param.device)
    temperature = TemperatureMap(net(tensors)[0].cpu().numpy().astype(np.float64))
    return temperature, temperature_scale(inputs.logits, temperature)


class Calibrator:
    """maps CalibrationInputs to (TemperatureMap or None, ProbabilityMap)"""

    kind: CalibratorKind

    def __call__(self, inputs: CalibrationInputs):
        raise NotImplementedError


class UncalibratedCalibrator(Calibrator):
    kind = CalibratorKind.UNCALIBRATED

    def __call__(self, inputs: CalibrationInputs):
        ones = np.ones((1,) + inputs.logits.shape)
        return TemperatureMap(ones), softmax(inputs.logits)


class GlobalTemperatureCalibrator(Calibrator):
    kind = CalibratorKind.GLOBAL_TS

    def __init__(self, temperature: float):
        if not temperature > 0:
            raise ValidationError("temperature must be strictly positive")
        self.temperature = float(temperature)

    def __call__(self, inputs: CalibrationInputs):
        temperature = TemperatureMap(np.full((1,) + inputs.logits.shape, self.temperature))
        return temperature, temperature_scale(inputs.logits, temperature)


class NetworkCalibrator(Calibrator):
    """LTS or the proposed calibrator, depending on the branch flags"""

    def __init__(self, model: FrozenModel):
        self.model = model
        self.kind = model.config.kind

    def __call__(self, inputs: CalibrationInputs):
        return calibrate(self.model, inputs)


class AleaCalibrator(Calibrator):
    """mean softmax over augmented copies; may move the argmax"""

    kind = CalibratorKind.ALEA

    def __call__(self, inputs: CalibrationInputs):
        if inputs.alea is None:
            raise ValidationError("the alea calibrator needs the augmented mean softmax")
        return None, inputs.alea


def save_calibrator(path, calibrator: Calibrator, seed: int) -> Path:
    """checkpoint directory tagged with kind, seed and branch flags"""
    path = Path(path)
    if isinstance(calibrator, NetworkCalibrator):
        config = calibrator.model.config
        return save_checkpoint(
            path,
            calibrator.model,
            kind=calibrator.kind.value,
            seed=seed,
            use_susceptibility=config.use_susceptibility,
            use_shape=config.use_shape,
        )
    path.mkdir(parents=True, exist_ok=True)
    meta = {"kind": calibrator.kind.value, "seed": seed, "version": package_version()}
    if isinstance(calibrator, GlobalTemperatureCalibrator):
        meta["temperature"] = calibrator.temperature
    (path / "calibrator.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_calibrator(path) -> Calibrator:
    path = Path(path)
    if (path / "checkpoint.json").exists():
        return NetworkCalibrator(load_checkpoint(path, build_calibrator, CalibNetConfig))
    meta = json.loads((path / "calibrator.json").read_text())
    kind = CalibratorKind(meta["kind"])
    if kind is CalibratorKind.GLOBAL_TS:
        return GlobalTemperatureCalibrator(meta["temperature"])
    if kind is CalibratorKind.ALEA:
        return AleaCalibrator()
    return UncalibratedCalibrator()
