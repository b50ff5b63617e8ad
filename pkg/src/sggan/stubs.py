"""Desk-scale stand-ins for the identity, perceptual, parsing and matcher networks.

All are trained on visible renders of a synthetic corpus:

* identity: subject classifier (its 5-tap pyramid feeds the identity loss)
* perceptual: self-supervised rotation classifier (generic features)
* parser: dense 11-class segmentation from ground-truth masks
* matcher: a second, wider subject classifier whose embedding is used for verification
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sggan.data import DatasetManifest, load_split
from sggan.errors import TrainingError
from sggan.networks import (
    FeatureNetwork,
    ParsingNetwork,
    build_feature_network,
    build_parsing_network,
    freeze,
    load_network,
    save_network,
    seeded,
)

logger = logging.getLogger(__name__)

IDENTITY_CHANNELS = (8, 16, 32, 32, 32)
MATCHER_CHANNELS = (16, 32, 64, 64, 64)


@dataclasses.dataclass
class StubNetworks:
    identity: FeatureNetwork
    perceptual: FeatureNetwork
    parser: ParsingNetwork

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_network(out / "identity.sggan", self.identity, role="identity")
        save_network(out / "perceptual.sggan", self.perceptual, role="perceptual")
        save_network(out / "parser.sggan", self.parser, role="parser")

    @classmethod
    def load(cls, in_dir) -> "StubNetworks":
        d = Path(in_dir)
        identity, _ = load_network(d / "identity.sggan", "FeatureNetwork")
        perceptual, _ = load_network(d / "perceptual.sggan", "FeatureNetwork")
        parser, _ = load_network(d / "parser.sggan", "ParsingNetwork")
        return cls(freeze(identity), freeze(perceptual), freeze(parser))


def _corpus(manifest: DatasetManifest, split: Optional[str]):
    samples = load_split(manifest, split)
    subjects = sorted({s.subject_id for s in samples})
    index = {sid: i for i, sid in enumerate(subjects)}
    images = torch.stack([s.visible.to_tensor() for s in samples])
    labels = torch.tensor([index[s.subject_id] for s in samples])
    masks = None
    if all(s.semantic_truth is not None for s in samples):
        masks = torch.from_numpy(np.stack([s.semantic_truth for s in samples]).astype(np.int64))
    return images, labels, masks, subjects


def _jitter(x: torch.Tensor, rng: np.random.Generator, flip: bool = True, max_shift: int = 2) -> torch.Tensor:
    """Random per-sample brightness, per-batch translation (by rolling) and horizontal flip."""
    gain = torch.from_numpy(rng.uniform(0.9, 1.1, size=(len(x), 1, 1, 1)).astype(np.float32))
    x = ((x + 1.0) * gain - 1.0).clamp(-1.0, 1.0)
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    x = torch.roll(x, shifts=(dy, dx), dims=(2, 3))
    if flip and rng.random() < 0.5:
        x = x.flip(3)
    return x


def _fit(net: nn.Module, n: int, loss_fn, epochs: int, batch_size: int, lr: float, seed: int) -> nn.Module:
    rng = np.random.default_rng([seed, 11])
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    net.train()
    with seeded(seed + 1):
        for epoch in range(epochs):
            for group in opt.param_groups:
                group["lr"] = lr * (1.0 - epoch / epochs)
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = torch.from_numpy(order[start : start + batch_size])
                loss = loss_fn(idx, rng)
                opt.zero_grad()
                loss.backward()
                opt.step()
    return freeze(net)


def train_classifier(images, labels, n_classes: int, seed: int, channels=IDENTITY_CHANNELS,
                     embed_dim: int = 64, epochs: int = 40, batch_size: int = 8, lr: float = 3e-3) -> FeatureNetwork:
    net = build_feature_network(seed, channels=channels, embed_dim=embed_dim, n_classes=n_classes)

    def loss_fn(idx, rng):
        return F.cross_entropy(net(_jitter(images[idx], rng)), labels[idx])

    return _fit(net, len(images), loss_fn, epochs, batch_size, lr, seed)


def train_rotation_net(images, seed: int, channels=IDENTITY_CHANNELS, epochs: int = 15,
                       batch_size: int = 16, lr: float = 1e-3) -> FeatureNetwork:
    net = build_feature_network(seed, channels=channels, embed_dim=32, n_classes=4)

    def loss_fn(idx, rng):
        x = _jitter(images[idx], rng)
        k = torch.from_numpy(rng.integers(0, 4, size=len(idx)))
        x = torch.stack([torch.rot90(xi, int(ki), dims=(1, 2)) for xi, ki in zip(x, k)])
        return F.cross_entropy(net(x), k)

    return _fit(net, len(images), loss_fn, epochs, batch_size, lr, seed)


def train_parser(images, masks, seed: int, width: int = 16, epochs: int = 30,
                 batch_size: int = 16, lr: float = 2e-3) -> ParsingNetwork:
    net = build_parsing_network(seed, width=width)

    def loss_fn(idx, rng):
        # no flip: it would swap the meaning of left/right classes
        dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
        x = torch.roll(images[idx], (dy, dx), (2, 3))
        m = torch.roll(masks[idx], (dy, dx), (1, 2))
        return F.cross_entropy(net(x), m)

    return _fit(net, len(images), loss_fn, epochs, batch_size, lr, seed)


def train_stub_networks(corpus: DatasetManifest, seed: int = 0, out_dir=None, split: Optional[str] = "train",
                        identity_epochs: int = 40, perceptual_epochs: int = 15,
                        parser_epochs: int = 30) -> StubNetworks:
    images, labels, masks, subjects = _corpus(corpus, split)
    if len(subjects) < 4:
        raise TrainingError(f"stub training needs >= 4 subjects, corpus has {len(subjects)}")
    if masks is None:
        raise TrainingError("stub training needs ground-truth masks for every sample")
    logger.info("training stub networks on %d images of %d subjects", len(images), len(subjects))
    identity = train_classifier(images, labels, len(subjects), seed * 10 + 1, epochs=identity_epochs)
    perceptual = train_rotation_net(images, seed * 10 + 2, epochs=perceptual_epochs)
    parser = train_parser(images, masks, seed * 10 + 3, epochs=parser_epochs)
    # bring the loss taps to a common scale so lambda weights stay meaningful
    identity.calibrate(images)
    perceptual.calibrate(images)
    nets = StubNetworks(identity, perceptual, parser)
    if out_dir is not None:
        nets.save(out_dir)
    return nets


def train_matcher(corpus: DatasetManifest, seed: int = 0, split: Optional[str] = "train",
                  embed_dim: int = 128, epochs: int = 40) -> FeatureNetwork:
    images, labels, _, subjects = _corpus(corpus, split)
    if len(subjects) < 2:
        raise TrainingError("matcher training needs >= 2 subjects")
    return train_classifier(images, labels, len(subjects), seed * 10 + 7, channels=MATCHER_CHANNELS,
                            embed_dim=embed_dim, epochs=epochs)


@torch.no_grad()
def top1_accuracy(net: FeatureNetwork, images: torch.Tensor, labels: torch.Tensor) -> float:
    return float((net(images).argmax(1) == labels).float().mean())


@torch.no_grad()
def pixel_accuracy(parser: ParsingNetwork, images: torch.Tensor, masks: torch.Tensor) -> float:
    return float((parser(images).argmax(1) == masks).float().mean())
