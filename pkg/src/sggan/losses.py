"""Adversarial, per-pixel, perceptual, identity and semantic losses and their composite."""

from __future__ import annotations

import dataclasses
import math
from typing import Mapping, Optional

import torch
import torch.nn.functional as F

from sggan.data import LabelGrouping, group_labels
from sggan.errors import ConfigError, NumericError, ShapeError
from sggan.networks import FeatureNetwork, FeaturePyramid, ParsingNetwork

EPS = 1e-7
# |logit| beyond which sigmoid leaves [EPS, 1 - EPS]
LOGIT_CLAMP = math.log((1 - EPS) / EPS)

TERMS = ("gan_g", "pixel", "perceptual", "identity", "semantic")


@dataclasses.dataclass(frozen=True)
class LossWeights:
    lambda_g: float = 1.0
    lambda_r: float = 100.0
    lambda_p: float = 10.0
    lambda_i: float = 20.0
    lambda_s: float = 1.0

    def __post_init__(self):
        values = dataclasses.astuple(self)
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise ConfigError(f"loss weights must be finite and non-negative: {values}")
        if not any(v > 0 for v in values):
            raise ConfigError("at least one loss weight must be positive")

    @classmethod
    def arl(cls) -> "LossWeights":
        return cls(lambda_s=20.0)

    def for_term(self, term: str) -> float:
        return {
            "gan_g": self.lambda_g,
            "pixel": self.lambda_r,
            "perceptual": self.lambda_p,
            "identity": self.lambda_i,
            "semantic": self.lambda_s,
        }[term]

    def restricted(self, enabled: set[str]) -> "LossWeights":
        """Zero the weights of loss terms not in ``enabled`` (subset of GAN/R/P/I/S)."""
        keys = {"GAN": "lambda_g", "R": "lambda_r", "P": "lambda_p", "I": "lambda_i", "S": "lambda_s"}
        unknown = set(enabled) - set(keys)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}")
        return dataclasses.replace(self, **{v: 0.0 for k, v in keys.items() if k not in enabled})


@dataclasses.dataclass(frozen=True)
class LossReport:
    gan_d: float = 0.0
    gan_g: float = 0.0
    pixel: float = 0.0
    perceptual: float = 0.0
    identity: float = 0.0
    semantic: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite {what}")


def adversarial_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Patch-mean of -log D(x,y) - log(1 - D(x,G(x))); pass d_fake from a detached G(x)."""
    _check_finite(d_real, "real logits")
    _check_finite(d_fake, "fake logits")
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    real = F.softplus(-d_real.clamp(min=-LOGIT_CLAMP)).mean()
    fake = F.softplus(d_fake.clamp(max=LOGIT_CLAMP)).mean()
    return real + fake


def adversarial_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: patch-mean of -log D(x, G(x))."""
    _check_finite(d_fake, "fake logits")
    return F.softplus(-d_fake.clamp(min=-LOGIT_CLAMP)).mean()


def pixel_loss(fake: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if fake.shape != target.shape:
        raise ShapeError(f"pixel loss shapes differ: {tuple(fake.shape)} vs {tuple(target.shape)}")
    return (fake - target).abs().mean()


def pyramid_l1(fake: FeaturePyramid, target: FeaturePyramid) -> torch.Tensor:
    """Stage-weighted sum of per-stage mean absolute differences (weights from ``fake``)."""
    if len(fake.stages) != len(target.stages):
        raise ShapeError(f"pyramids have {len(fake.stages)} and {len(target.stages)} stages")
    total = fake.stages[0].new_zeros(())
    for w, a, b in zip(fake.weights, fake.stages, target.stages):
        if a.shape != b.shape:
            raise ShapeError(f"stage shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        if w:
            total = total + w * (a - b).abs().mean()
    return total


def feature_loss(net: FeatureNetwork, fake: torch.Tensor, target: torch.Tensor,
                 target_pyramid: Optional[FeaturePyramid] = None) -> torch.Tensor:
    """pyramid_l1 between ``net``'s pyramids of fake and target images."""
    if target_pyramid is None:
        with torch.no_grad():
            target_pyramid = net.pyramid(target)
    return pyramid_l1(net.pyramid(fake), target_pyramid)


# perceptual and identity losses differ only in which network supplies the pyramid
perceptual_loss = feature_loss
identity_loss = feature_loss


def semantic_loss(fake_map: torch.Tensor, target_map: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between (grouped) class-probability volumes."""
    if fake_map.dim() != target_map.dim() or fake_map.shape[-3] != target_map.shape[-3]:
        raise ConfigError(
            f"semantic maps need the same class count: {tuple(fake_map.shape)} vs {tuple(target_map.shape)}"
        )
    if fake_map.shape != target_map.shape:
        raise ShapeError(f"semantic map shapes differ: {tuple(fake_map.shape)} vs {tuple(target_map.shape)}")
    return (fake_map - target_map).abs().mean()


def parsed_semantic_loss(parser: ParsingNetwork, fake: torch.Tensor, target: torch.Tensor,
                         grouping: LabelGrouping, target_map: Optional[torch.Tensor] = None) -> torch.Tensor:
    if target_map is None:
        with torch.no_grad():
            target_map = group_labels(torch.softmax(parser(target), 1), grouping)
    fake_map = group_labels(torch.softmax(parser(fake), 1), grouping)
    return semantic_loss(fake_map, target_map)


def weighted_total(terms: Mapping[str, object], w: LossWeights):
    """lambda_G*gan_g + lambda_R*pixel + lambda_P*perceptual + lambda_I*identity + lambda_S*semantic.

    Works on floats or tensors; missing terms count as zero.
    """
    total = 0.0
    for name in TERMS:
        if name in terms:
            total = total + w.for_term(name) * terms[name]
    return total


def composite_loss(terms: Mapping[str, object], w: LossWeights) -> LossReport:
    """Record every term and the weighted generator objective; gan_d is reported as-is."""
    values = {k: float(v) for k, v in terms.items()}
    unknown = set(values) - set(TERMS) - {"gan_d"}
    if unknown:
        raise ConfigError(f"unknown loss terms {sorted(unknown)}")
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite loss term in {values}")
    return LossReport(**values, total=weighted_total(values, w))
