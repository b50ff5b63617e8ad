"""Generator, discriminator, feature pyramids and face parsing networks."""

from __future__ import annotations

import dataclasses
import math
from contextlib import contextmanager
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from sggan import checkpoint
from sggan.data import NUM_CLASSES, Image
from sggan.errors import LoadError, ShapeError

DEFAULT_STAGE_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
TAP_NAMES = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")


@contextmanager
def seeded(seed: Optional[int]):
    """Run a block under a private torch RNG stream; global state is restored afterwards."""
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _init_weights(module: nn.Module) -> None:
    # pix2pix initialization
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# generator


@dataclasses.dataclass(frozen=True)
class GeneratorSpec:
    depth: int = 8
    base_channels: int = 64
    dropout_rate: float = 0.5
    in_channels: int = 3
    out_channels: int = 3
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("generator depth must be >= 2")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must be in [0, 1]")

    @classmethod
    def for_image_size(cls, size: int, base_channels: int = 64, **kw) -> "GeneratorSpec":
        """Deepest U-Net (capped at 8 stages) whose innermost map is 1x1."""
        depth = min(8, int(math.log2(size)))
        if 2**depth != size and size % 2**depth:
            raise ShapeError(f"image size {size} not divisible by 2^{depth}")
        return cls(depth=depth, base_channels=base_channels, **kw)

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_channels * min(2**i, 8) for i in range(self.depth)]


class UNetGenerator(nn.Module):
    """U-Net: decoder stage n-i sees its upsampled input concatenated with encoder stage i."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        enc = spec.encoder_channels
        d = spec.depth
        self.down = nn.ModuleList()
        in_c = spec.in_channels
        for i, c in enumerate(enc):
            layers: list[nn.Module] = [nn.Conv2d(in_c, c, 4, 2, 1, bias=not (0 < i < d - 1))]
            if 0 < i < d - 1:
                layers.append(nn.BatchNorm2d(c))
            layers.append(nn.ReLU(True) if i == d - 1 else nn.LeakyReLU(spec.leaky_slope, True))
            self.down.append(nn.Sequential(*layers))
            in_c = c

        self.up = nn.ModuleList()
        for k in range(d):
            skip_in = enc[d - 1 - k]
            in_c = skip_in if k == 0 else 2 * skip_in
            if k == d - 1:
                self.up.append(nn.Sequential(nn.ConvTranspose2d(in_c, spec.out_channels, 4, 2, 1), nn.Tanh()))
                continue
            out_c = enc[d - 2 - k]
            layers = [nn.ConvTranspose2d(in_c, out_c, 4, 2, 1, bias=False), nn.BatchNorm2d(out_c)]
            if 1 <= k <= 3 and spec.dropout_rate > 0:
                layers.append(nn.Dropout(spec.dropout_rate))
            layers.append(nn.ReLU(True))
            self.up.append(nn.Sequential(*layers))

    def arch(self) -> dict:
        return dataclasses.asdict(self.spec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected N x {self.spec.in_channels} x H x W input, got {tuple(x.shape)}")
        m = 2**self.spec.depth
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by 2^{self.spec.depth}={m}")
        skips = []
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
        h = self.up[0](skips[-1])
        for k in range(1, self.spec.depth):
            h = self.up[k](torch.cat([h, skips[-1 - k]], dim=1))
        return h


def build_generator(spec: GeneratorSpec = GeneratorSpec(), seed: int = 0) -> UNetGenerator:
    with seeded(seed):
        g = UNetGenerator(spec)
        _init_weights(g)
    return g


def _as_batch(x):
    if isinstance(x, Image):
        return x.to_tensor()[None], True
    if x.dim() == 3:
        return x[None], True
    return x, False


def generator_forward(g: UNetGenerator, x, mode: str = "eval", seed: Optional[int] = None):
    """Translate thermal input(s) to visible.

    ``x`` may be an Image, a 3 x H x W tensor or an N x 3 x H x W tensor; the
    result has the matching form. ``seed`` fixes the dropout masks in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_image = isinstance(x, Image)
    batch, squeeze = _as_batch(x)
    g.train(mode == "train")
    with seeded(seed):
        if mode == "eval":
            with torch.no_grad():
                out = g(batch)
        else:
            out = g(batch)
    if was_image:
        return Image(out[0].detach().permute(1, 2, 0).numpy().clip(-1.0, 1.0))
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# discriminator


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN conditioned on the thermal input (channel concatenation)."""

    def __init__(self, in_channels: int = 6, ndf: int = 64, n_layers: int = 3, leaky_slope: float = 0.2):
        super().__init__()
        self._arch = dict(in_channels=in_channels, ndf=ndf, n_layers=n_layers, leaky_slope=leaky_slope)
        layers: list[nn.Module] = [nn.Conv2d(in_channels, ndf, 4, 2, 1), nn.LeakyReLU(leaky_slope, True)]
        mult = 1
        for n in range(1, n_layers + 1):
            prev, mult = mult, min(2**n, 8)
            stride = 2 if n < n_layers else 1
            layers += [
                nn.Conv2d(ndf * prev, ndf * mult, 4, stride, 1, bias=False),
                nn.BatchNorm2d(ndf * mult),
                nn.LeakyReLU(leaky_slope, True),
            ]
        layers.append(nn.Conv2d(ndf * mult, 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)

    def arch(self) -> dict:
        return dict(self._arch)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape != y.shape:
            raise ShapeError(f"condition {tuple(x.shape)} and candidate {tuple(y.shape)} differ")
        return self.model(torch.cat([x, y], dim=1))


def build_discriminator(seed: int = 0, ndf: int = 64, n_layers: int = 3) -> PatchDiscriminator:
    with seeded(seed):
        d = PatchDiscriminator(ndf=ndf, n_layers=n_layers)
        _init_weights(d)
    return d


def discriminator_forward(d: PatchDiscriminator, x, y) -> torch.Tensor:
    """Patch logits (N x 1 x h' x w', pre-sigmoid) for condition x and candidate y."""
    xb, squeeze = _as_batch(x)
    yb, _ = _as_batch(y)
    out = d(xb, yb)
    return out[0] if squeeze else out


def conv_geometry(module: nn.Module) -> list[tuple[int, int, int]]:
    """(kernel, stride, padding) of every Conv2d in forward order."""
    return [
        (m.kernel_size[0], m.stride[0], m.padding[0]) for m in module.modules() if isinstance(m, nn.Conv2d)
    ]


def receptive_field(layers: Sequence[tuple[int, int, int]]) -> tuple[int, int, int]:
    """(size, jump, start) of one output unit for a stack of (kernel, stride, padding) convs.

    Output index i covers input pixels ``start + i * jump`` .. ``start + i * jump + size - 1``
    (coordinates may fall in the zero padding).
    """
    size, jump, start = 1, 1, 0
    for k, s, p in layers:
        size += (k - 1) * jump
        start -= p * jump
        jump *= s
    return size, jump, start


# ---------------------------------------------------------------------------
# feature networks


@dataclasses.dataclass
class FeaturePyramid:
    """Stage-ordered feature maps, relu1_1 first."""

    stages: list[torch.Tensor]
    weights: tuple[float, ...] = DEFAULT_STAGE_WEIGHTS

    def __post_init__(self):
        if len(self.stages) != len(self.weights):
            raise ShapeError(f"{len(self.stages)} stages but {len(self.weights)} weights")
        if any(w < 0 for w in self.weights):
            raise ValueError("stage weights must be non-negative")


class FeatureNetwork(nn.Module):
    """VGG-style stack tapped after the first ReLU of each of five stages.

    No batch normalization. Optional head: global pooling -> embedding -> classes.
    """

    def __init__(
        self,
        channels: Sequence[int] = (16, 32, 64, 64, 64),
        embed_dim: Optional[int] = None,
        n_classes: Optional[int] = None,
        stage_weights: Sequence[float] = DEFAULT_STAGE_WEIGHTS,
    ):
        super().__init__()
        if len(channels) != 5:
            raise ValueError("feature network needs exactly 5 stages")
        self._arch = dict(
            channels=list(channels), embed_dim=embed_dim, n_classes=n_classes, stage_weights=list(stage_weights)
        )
        self.stage_weights = tuple(stage_weights)
        self.first = nn.ModuleList()
        self.rest = nn.ModuleList()
        prev = 3
        for c in channels:
            self.first.append(nn.Sequential(nn.Conv2d(prev, c, 3, 1, 1), nn.ReLU()))
            self.rest.append(nn.Sequential(nn.Conv2d(c, c, 3, 1, 1), nn.ReLU()))
            prev = c
        pooled = sum(channels)
        self.embedding = nn.Linear(pooled, embed_dim) if embed_dim else None
        self.classifier = nn.Linear(embed_dim or pooled, n_classes) if n_classes else None
        # He init keeps activations from vanishing through ten un-normalized convs
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # per-stage divisor applied to loss taps only; set by calibrate()
        self.register_buffer("tap_scale", torch.ones(5))

    def arch(self) -> dict:
        return dict(self._arch)

    @torch.no_grad()
    def calibrate(self, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
        """Set tap_scale so each loss tap has unit mean |activation| over ``images``."""
        sums = torch.zeros(5, dtype=torch.float64)
        for start in range(0, len(images), batch_size):
            taps, _ = self._run(images[start : start + batch_size])
            sums += torch.tensor([float(t.abs().mean()) * len(t) for t in taps], dtype=torch.float64)
        mean = (sums / len(images)).clamp_min(1e-6)
        self.tap_scale.copy_(mean.float())
        return self.tap_scale.clone()

    @property
    def embed_dim(self) -> int:
        return self._arch["embed_dim"] or sum(self._arch["channels"])

    def _run(self, x: torch.Tensor):
        taps = []
        h = x
        for k, (first, rest) in enumerate(zip(self.first, self.rest)):
            if k:
                h = F.max_pool2d(h, 2, ceil_mode=True)
            h = first(h)
            taps.append(h)
            h = rest(h)
        return taps, h

    def pyramid(self, x: torch.Tensor) -> FeaturePyramid:
        taps, _ = self._run(x)
        return FeaturePyramid([t / s for t, s in zip(taps, self.tap_scale)], self.stage_weights)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        # global average of every stage's tap: colour and geometry at all scales
        taps, _ = self._run(x)
        v = torch.cat([t.mean(dim=(2, 3)) for t in taps], dim=1)
        return self.embedding(v) if self.embedding is not None else v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        v = self.embed(x)
        if self.classifier is None:
            return v
        return self.classifier(F.relu(v))


def build_feature_network(seed: int = 0, **kw) -> FeatureNetwork:
    with seeded(seed):
        return FeatureNetwork(**kw)


def extract_features(net: FeatureNetwork, img) -> FeaturePyramid:
    batch, squeeze = _as_batch(img)
    pyr = net.pyramid(batch)
    if squeeze:
        return FeaturePyramid([s[0] for s in pyr.stages], pyr.weights)
    return pyr


# ---------------------------------------------------------------------------
# parsing


class ParsingNetwork(nn.Module):
    """Small encoder-decoder producing per-pixel class logits at input resolution."""

    def __init__(self, n_classes: int = NUM_CLASSES, width: int = 16):
        super().__init__()
        self._arch = dict(n_classes=n_classes, width=width)
        w = width

        def block(i, o):
            return nn.Sequential(nn.Conv2d(i, o, 3, 1, 1), nn.ReLU(), nn.Conv2d(o, o, 3, 1, 1), nn.ReLU())

        self.enc1 = block(3, w)
        self.enc2 = block(w, 2 * w)
        self.enc3 = block(2 * w, 4 * w)
        self.dec2 = block(6 * w, 2 * w)
        self.dec1 = block(3 * w, w)
        self.head = nn.Conv2d(w, n_classes, 1)

    def arch(self) -> dict:
        return dict(self._arch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2, ceil_mode=True))
        e3 = self.enc3(F.max_pool2d(e2, 2, ceil_mode=True))
        u2 = F.interpolate(e3, size=e2.shape[2:], mode="bilinear", align_corners=False)
        d2 = self.dec2(torch.cat([u2, e2], 1))
        u1 = F.interpolate(d2, size=e1.shape[2:], mode="bilinear", align_corners=False)
        d1 = self.dec1(torch.cat([u1, e1], 1))
        return self.head(d1)


def build_parsing_network(seed: int = 0, **kw) -> ParsingNetwork:
    with seeded(seed):
        return ParsingNetwork(**kw)


def parse_semantics(net: ParsingNetwork, img) -> torch.Tensor:
    """Per-pixel class probabilities (C x H x W, or N x C x H x W for a batch)."""
    batch, squeeze = _as_batch(img)
    probs = torch.softmax(net(batch), dim=1)
    return probs[0] if squeeze else probs


# ---------------------------------------------------------------------------
# persistence

_KINDS = {
    "UNetGenerator": lambda a: UNetGenerator(GeneratorSpec(**a)),
    "PatchDiscriminator": lambda a: PatchDiscriminator(**a),
    "FeatureNetwork": lambda a: FeatureNetwork(**a),
    "ParsingNetwork": lambda a: ParsingNetwork(**a),
}


def network_tensors(net: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in net.state_dict().items()}


def instantiate(kind: str, arch: dict) -> nn.Module:
    if kind not in _KINDS:
        raise LoadError(f"unknown network kind {kind!r}")
    try:
        return _KINDS[kind](arch)
    except TypeError as exc:
        raise LoadError(f"bad architecture for {kind}: {exc}") from exc


def load_into(net: nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy ``prefix``-named tensors into ``net``; any key or shape mismatch is a LoadError."""
    own = net.state_dict()
    picked = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(own) - set(picked))
    extra = sorted(set(picked) - set(own))
    if missing or extra:
        raise LoadError(f"parameter names differ: missing={missing[:3]} unexpected={extra[:3]}")
    for k, v in picked.items():
        if own[k].shape != v.shape:
            raise LoadError(f"shape mismatch for {prefix}{k}: {tuple(own[k].shape)} vs {tuple(v.shape)}")
    net.load_state_dict(picked)


def save_network(path, net: nn.Module, **meta) -> None:
    checkpoint.save(path, network_tensors(net), {"kind": type(net).__name__, "arch": net.arch(), **meta})


def load_network(path, kind: Optional[str] = None) -> tuple[nn.Module, dict]:
    tensors, meta = checkpoint.load(path)
    if kind is not None and meta.get("kind") != kind:
        raise LoadError(f"{path} holds a {meta.get('kind')}, expected {kind}")
    net = instantiate(meta["kind"], meta["arch"])
    load_into(net, tensors)
    net.eval()
    return net, meta


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net
