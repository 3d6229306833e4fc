"""
aleatoric-by-augmentation: per-pixel logit statistics under repeated photometric augmentation
"""

__all__ = [
    "estimate",
    "alea_probability",
    "propagate",
    "estimate_tensor",
    "cached_estimate",
]

import logging
from typing import Optional

import numpy as np
import torch

from ._cache import cached_arrays
from ._core import derive_seed, softmax
from .augment import AugmentationPolicy, apply_photometric, sample_params
from .misc import (
    ImageSlice,
    PolicyError,
    ProbabilityMap,
    SusceptibilityEstimate,
    ValidationError,
)
from .segnet import forward_batch, model_fingerprint, stack_images

logger = logging.getLogger(__name__)


def _check(policy: AugmentationPolicy, n_aug: int):
    if n_aug < 1:
        raise ValidationError("n_aug must be at least 1")
    if not policy.is_photometric_only:
        # a warp would misalign the per-pixel statistics
        raise PolicyError(
            "susceptibility estimation accepts photometric transforms only, got %s"
            % sorted(policy.enabled)
        )


def _augmented_copies(x: ImageSlice, policy: AugmentationPolicy, n_aug: int, seed: int):
    for index in range(n_aug):
        yield apply_photometric(x, sample_params(policy, derive_seed(seed, "alea", index)))


class _Welford:
    """running mean / M2 in float64 with a fixed accumulation order"""

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def add(self, value: np.ndarray):
        value = value.astype(np.float64)
        self.count += 1
        if self.mean is None:
            self.mean = value.copy()
            self.m2 = np.zeros_like(value)
            return
        delta = value - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (value - self.mean)

    @property
    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        # unbiased, n_aug is small
        return np.maximum(self.m2 / (self.count - 1), 0.0)


def propagate(model, x: ImageSlice, policy: AugmentationPolicy, n_aug: int, seed: int):
    """
    Send n_aug augmented copies of x through the model one at a time.

    Returns (SusceptibilityEstimate, ProbabilityMap) where the probability map
    is the mean softmax over the copies.
    """
    _check(policy, n_aug)
    logits_acc, prob_acc = _Welford(), _Welford()
    for copy in _augmented_copies(x, policy, n_aug, seed):
        logits = forward_batch(model, stack_images([copy]))[0].numpy().astype(np.float64)
        logits_acc.add(logits)
        prob_acc.add(softmax(logits))
    estimate_ = SusceptibilityEstimate(logits_acc.mean, logits_acc.variance, n_aug)
    return estimate_, ProbabilityMap(prob_acc.mean)


def estimate(model, x: ImageSlice, policy: AugmentationPolicy, n_aug: int = 6, seed: int = 0):
    """mean and unbiased per-pixel, per-class variance of the logits (zero for n_aug == 1)"""
    return propagate(model, x, policy, n_aug, seed)[0]


def alea_probability(
    model, x: ImageSlice, policy: AugmentationPolicy, n_aug: int = 6, seed: int = 0
) -> ProbabilityMap:
    """mean softmax over augmented copies; may move the argmax relative to f(x)"""
    return propagate(model, x, policy, n_aug, seed)[1]


@torch.no_grad()
def estimate_tensor(
    model, images: torch.Tensor, policy: AugmentationPolicy, n_aug: int, seed: int
):
    """
    Batched estimate for training loops.

    images: (B, 1, M, N) in [0, 1]; returns float32 (mu, var), each (B, C, M, N).
    All B * n_aug copies go through the model as one batch.
    """
    _check(policy, n_aug)
    copies = []
    for index in range(n_aug):
        for b in range(images.shape[0]):
            x = ImageSlice(images[b].cpu().numpy())
            params = sample_params(policy, derive_seed(seed, "alea", index, b))
            copies.append(apply_photometric(x, params))
    logits = forward_batch(model, stack_images(copies)).to(torch.float64)
    logits = logits.reshape((n_aug, images.shape[0]) + tuple(logits.shape[1:]))
    mu = logits.mean(dim=0)
    if n_aug > 1:
        var = logits.var(dim=0, unbiased=True)
    else:
        var = torch.zeros_like(mu)
    return mu.float(), var.float()


def cached_estimate(
    model,
    x: ImageSlice,
    policy: AugmentationPolicy,
    n_aug: int,
    seed: int,
    store_dir=None,
    fingerprint: Optional[str] = None,
):
    """
    propagate() memoised by (model hash, slice id, policy hash, n_aug, seed).

    Returns (SusceptibilityEstimate, ProbabilityMap); cached values are float32.
    """
    key_parts = (
        fingerprint or model_fingerprint(model.net if hasattr(model, "net") else model),
        x.case_id,
        x.slice_index,
        policy.to_dict(),
        n_aug,
        seed,
        # corrupted copies share case and slice ids
        x.data,
    )

    def _compute():
        est, prob = propagate(model, x, policy, n_aug, seed)
        return {"mu": est.mu, "var": est.var, "alea": prob.data}

    arrays = cached_arrays("susceptibility", key_parts, _compute, store_dir=store_dir)
    alea = arrays["alea"].astype(np.float64)
    # float32 storage perturbs the channel sums slightly
    alea = alea / alea.sum(axis=0, keepdims=True)
    return (
        SusceptibilityEstimate(arrays["mu"], arrays["var"], n_aug),
        ProbabilityMap(alea),
    )
