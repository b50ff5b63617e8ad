"""Paired thermal/visible data: ingest, manifests, augmentation and label grouping."""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from sggan.errors import AlignmentError, ConfigError, IngestError, ShapeError

logger = logging.getLogger(__name__)

# HELEN label order.
CLASS_NAMES = (
    "background",
    "skin",
    "left_brow",
    "right_brow",
    "left_eye",
    "right_eye",
    "nose",
    "upper_lip",
    "inner_mouth",
    "lower_lip",
    "hair",
)
NUM_CLASSES = len(CLASS_NAMES)
SALIENT_CLASSES = (
    "left_brow",
    "right_brow",
    "left_eye",
    "right_eye",
    "nose",
    "upper_lip",
    "inner_mouth",
    "lower_lip",
)

VISIBLE = "visible-rgb"
THERMAL = "thermal-replicated"


@dataclasses.dataclass(frozen=True)
class Image:
    """An H x W x 3 float32 raster with values in [-1, 1]."""

    pixels: np.ndarray
    color_space: str = VISIBLE

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeError(f"expected H x W x 3 pixels, got {p.shape}")
        h, w = p.shape[:2]
        if h <= 0 or w <= 0 or h % 4 or w % 4:
            raise ShapeError(f"height and width must be positive multiples of 4, got {h}x{w}")
        if self.color_space not in (VISIBLE, THERMAL):
            raise ValueError(f"unknown color space {self.color_space!r}")
        if p.size and (p.min() < -1.0 or p.max() > 1.0):
            raise ValueError("pixel values outside [-1, 1]")
        if self.color_space == THERMAL and not (
            np.array_equal(p[..., 0], p[..., 1]) and np.array_equal(p[..., 0], p[..., 2])
        ):
            raise ValueError("thermal image channels must be identical")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_tensor(self) -> torch.Tensor:
        """3 x H x W float32 tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1)))


@dataclasses.dataclass(frozen=True)
class AugmentParams:
    load_size: int
    crop_size: int
    top: int
    left: int
    flip: bool


@dataclasses.dataclass(frozen=True)
class PairedSample:
    thermal: Image
    visible: Image
    subject_id: str
    semantic_truth: Optional[np.ndarray] = None  # H x W uint8 class indices
    transform: Optional[AugmentParams] = None

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id must be non-empty")
        if self.thermal.pixels.shape != self.visible.pixels.shape:
            raise AlignmentError(
                f"thermal {self.thermal.pixels.shape[:2]} vs visible {self.visible.pixels.shape[:2]}"
            )
        if self.semantic_truth is not None and self.semantic_truth.shape != self.visible.pixels.shape[:2]:
            raise AlignmentError("mask dimensions differ from the image pair")


# ---------------------------------------------------------------------------
# manifests


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    split: str
    subject_id: str
    thermal_path: str
    visible_path: str
    mask_path: Optional[str] = None

    def to_line(self) -> str:
        return "\t".join(
            [self.split, self.subject_id, self.thermal_path, self.visible_path, self.mask_path or "-"]
        )

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 5:
            raise ConfigError(f"manifest line needs 5 tab-separated fields: {line!r}")
        split, subject, thermal, visible, mask = fields
        if split not in ("train", "test"):
            raise ConfigError(f"unknown split {split!r}")
        return cls(split, subject, thermal, visible, None if mask == "-" else mask)


@dataclasses.dataclass
class DatasetManifest:
    """Manifest entries plus the directory their relative paths resolve against."""

    entries: list[ManifestEntry]
    root: Path = Path(".")

    def __post_init__(self):
        self.root = Path(self.root)
        self.validate()

    def validate(self) -> None:
        for split in ("train", "test"):
            seen: set[str] = set()
            for e in self.entries:
                if e.split != split:
                    continue
                for p in (e.thermal_path, e.visible_path, e.mask_path):
                    if p is None:
                        continue
                    if p in seen:
                        raise ConfigError(f"path listed twice in {split} split: {p}")
                    seen.add(p)
        overlap = self.subjects("train") & self.subjects("test")
        if overlap:
            raise ConfigError(f"subjects in both train and test: {sorted(overlap)}")

    def subjects(self, split: Optional[str] = None) -> set[str]:
        return {e.subject_id for e in self.entries if split is None or e.split == split}

    def select(self, split: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == split], self.root)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(e.to_line() + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.tsv"
        if not path.exists():
            raise IngestError(f"manifest not found: {path}")
        entries = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            entries.append(ManifestEntry.from_line(line))
        return cls(entries, path.parent)


# ---------------------------------------------------------------------------
# ingest


def to_unit_range(raw: np.ndarray) -> np.ndarray:
    """Map stored uint8 values [0, 255] affinely onto [-1, 1]."""
    return (raw.astype(np.float32) * (2.0 / 255.0) - 1.0).astype(np.float32)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Inverse of to_unit_range, rounding to the nearest stored level."""
    return np.clip(np.rint((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _read_raster(path: Path) -> np.ndarray:
    if not path.exists():
        raise IngestError(f"missing image file: {path}")
    try:
        with PILImage.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot decode {path}: {exc}") from exc
    return arr


def read_image(path, color_space: str = VISIBLE) -> Image:
    arr = _read_raster(Path(path))
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    elif color_space == THERMAL:
        # replicate the first channel so the channels are identical
        arr = np.repeat(arr[..., :1], 3, axis=2)
    return Image(to_unit_range(arr), color_space)


def write_image(path, image: Image | np.ndarray) -> None:
    pixels = image.pixels if isinstance(image, Image) else image
    raw = to_uint8(pixels)
    if isinstance(image, Image) and image.color_space == THERMAL:
        PILImage.fromarray(raw[..., 0], mode="L").save(path)
    else:
        PILImage.fromarray(raw, mode="RGB").save(path)


def read_mask(path) -> np.ndarray:
    arr = _read_raster(Path(path))
    if arr.ndim != 2:
        raise IngestError(f"mask must be single-channel: {path}")
    if arr.max(initial=0) >= NUM_CLASSES:
        raise IngestError(f"mask class index out of range in {path}")
    return arr.astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    PILImage.fromarray(mask.astype(np.uint8), mode="L").save(path)


def load_pair(entry: ManifestEntry, root=".") -> PairedSample:
    root = Path(root)
    thermal = read_image(root / entry.thermal_path, THERMAL)
    visible = read_image(root / entry.visible_path, VISIBLE)
    if thermal.pixels.shape != visible.pixels.shape:
        raise AlignmentError(
            f"{entry.thermal_path} is {thermal.height}x{thermal.width}, "
            f"{entry.visible_path} is {visible.height}x{visible.width}"
        )
    mask = read_mask(root / entry.mask_path) if entry.mask_path else None
    return PairedSample(thermal, visible, entry.subject_id, mask)


def load_split(manifest: DatasetManifest, split: Optional[str] = None) -> list[PairedSample]:
    entries = manifest.entries if split is None else manifest.select(split).entries
    return [load_pair(e, manifest.root) for e in entries]


# ---------------------------------------------------------------------------
# augmentation


def sample_augment_params(
    rng: np.random.Generator, load_size: int = 286, crop_size: int = 256, flip: bool = True
) -> AugmentParams:
    if crop_size > load_size:
        raise ConfigError(f"crop size {crop_size} exceeds rescale size {load_size}")
    top = int(rng.integers(0, load_size - crop_size + 1))
    left = int(rng.integers(0, load_size - crop_size + 1))
    do_flip = bool(rng.random() < 0.5) if flip else False
    return AugmentParams(load_size, crop_size, top, left, do_flip)


def _resize(arr: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    if nearest:
        t = torch.from_numpy(arr.astype(np.float32))[None, None]
        out = F.interpolate(t, size=(size, size), mode="nearest")
        return out[0, 0].numpy().astype(arr.dtype)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return np.clip(out[0].numpy().transpose(1, 2, 0), -1.0, 1.0)


def _apply(arr: np.ndarray, p: AugmentParams, nearest: bool = False) -> np.ndarray:
    arr = _resize(arr, p.load_size, nearest)
    arr = arr[p.top : p.top + p.crop_size, p.left : p.left + p.crop_size]
    if p.flip:
        arr = arr[:, ::-1]
    return np.ascontiguousarray(arr)


def augment(
    pair: PairedSample,
    rng: Optional[np.random.Generator] = None,
    load_size: int = 286,
    crop_size: int = 256,
    flip: bool = True,
    params: Optional[AugmentParams] = None,
) -> PairedSample:
    """Rescale, random-crop and maybe flip a pair with one shared transform.

    Pass ``params`` to force a specific transform; otherwise it is drawn from ``rng``.
    The applied transform is recorded on the returned sample.
    """
    if params is None:
        if rng is None:
            raise ValueError("augment needs either rng or params")
        params = sample_augment_params(rng, load_size, crop_size, flip)
    elif params.crop_size > params.load_size:
        raise ConfigError(f"crop size {params.crop_size} exceeds rescale size {params.load_size}")
    thermal = Image(_apply(pair.thermal.pixels, params), pair.thermal.color_space)
    visible = Image(_apply(pair.visible.pixels, params), pair.visible.color_space)
    mask = None if pair.semantic_truth is None else _apply(pair.semantic_truth, params, nearest=True)
    return PairedSample(thermal, visible, pair.subject_id, mask, params)


def sample_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent random stream for (seed, epoch, index, ...), stable under reordering."""
    return np.random.default_rng([seed, *stream])


# ---------------------------------------------------------------------------
# semantic label grouping


@dataclasses.dataclass(frozen=True)
class LabelGrouping:
    """Total map from the 11 source classes onto K target classes."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        if len(self.mapping) != NUM_CLASSES:
            raise ConfigError(f"grouping must map all {NUM_CLASSES} source classes, got {len(self.mapping)}")
        targets = set(self.mapping)
        k = len(targets)
        if targets != set(range(k)):
            raise ConfigError(f"target classes must be exactly 0..K-1, got {sorted(targets)}")
        if not 2 <= k <= NUM_CLASSES:
            raise ConfigError(f"target class count must be in [2, 11], got {k}")

    @property
    def k(self) -> int:
        return max(self.mapping) + 1

    def matrix(self) -> np.ndarray:
        m = np.zeros((self.k, NUM_CLASSES), dtype=np.float64)
        m[list(self.mapping), range(NUM_CLASSES)] = 1.0
        return m

    @classmethod
    def identity(cls) -> "LabelGrouping":
        return cls(tuple(range(NUM_CLASSES)))

    @classmethod
    def two_class(cls) -> "LabelGrouping":
        """Salient components (brows, eyes, nose, mouth) -> 1, everything else -> 0."""
        return cls(tuple(1 if name in SALIENT_CLASSES else 0 for name in CLASS_NAMES))

    @classmethod
    def components(cls) -> "LabelGrouping":
        """other / brows / eyes / nose / mouth."""
        groups = {
            "left_brow": 1, "right_brow": 1,
            "left_eye": 2, "right_eye": 2,
            "nose": 3,
            "upper_lip": 4, "inner_mouth": 4, "lower_lip": 4,
        }
        return cls(tuple(groups.get(name, 0) for name in CLASS_NAMES))

    @classmethod
    def named(cls, name: str) -> "LabelGrouping":
        table = {"identity": cls.identity, "two_class": cls.two_class, "components": cls.components}
        if name not in table:
            raise ConfigError(f"unknown label grouping {name!r}; choose from {sorted(table)}")
        return table[name]()


def group_labels(probs, grouping: LabelGrouping):
    """Sum source-class probability channels into grouped channels.

    Accepts a C x H x W or N x C x H x W array or tensor with C == 11.
    """
    channel_axis = probs.ndim - 3
    if probs.ndim not in (3, 4) or probs.shape[channel_axis] != NUM_CLASSES:
        raise ConfigError(f"expected {NUM_CLASSES} class channels, got shape {tuple(probs.shape)}")
    if isinstance(probs, torch.Tensor):
        m = torch.as_tensor(grouping.matrix(), dtype=probs.dtype, device=probs.device)
        return torch.einsum("kc,...chw->...khw", m, probs)
    return np.einsum("kc,...chw->...khw", grouping.matrix().astype(probs.dtype), probs)


def one_hot(mask: np.ndarray, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """H x W class indices -> n_classes x H x W probability stack."""
    return (np.arange(n_classes)[:, None, None] == mask[None]).astype(np.float32)


def stack_images(images: Sequence[Image]) -> torch.Tensor:
    return torch.stack([im.to_tensor() for im in images])


def batch_tensors(samples: Iterable[PairedSample]):
    """Stack samples into (thermal, visible, masks-or-None) N x C x H x W tensors."""
    samples = list(samples)
    x = stack_images([s.thermal for s in samples])
    y = stack_images([s.visible for s in samples])
    masks = None
    if all(s.semantic_truth is not None for s in samples):
        masks = torch.from_numpy(np.stack([s.semantic_truth for s in samples]).astype(np.int64))
    return x, y, masks
