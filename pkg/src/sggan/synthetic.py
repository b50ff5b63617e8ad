"""Procedural paired thermal/visible face corpus with ground-truth parsing masks.

Faces are drawn from per-subject geometry and colour parameters with per-sample
jitter. The thermal counterpart is a deterministic function of the visible
render: luminance collapse, an intensity remap and a Gaussian blur.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from sggan.data import (
    CLASS_NAMES,
    THERMAL,
    VISIBLE,
    DatasetManifest,
    Image,
    ManifestEntry,
    to_unit_range,
    write_image,
    write_mask,
)
from sggan.errors import ConfigError

logger = logging.getLogger(__name__)

CLS = {name: i for i, name in enumerate(CLASS_NAMES)}

# thermal remap per style: (offset, gain, gamma, blur sigma at 64 px)
THERMAL_STYLES = {
    "A": (0.10, 0.85, 0.70, 1.0),
    "B": (0.30, 0.55, 1.50, 1.6),
}


@dataclasses.dataclass(frozen=True)
class SyntheticConfig:
    n_subjects: int = 12
    pairs_per_subject: int = 4
    image_size: int = 64
    seed: int = 0
    style: str = "A"
    test_fraction: float = 1 / 3

    def validate(self) -> None:
        if self.n_subjects < 2:
            raise ConfigError("n_subjects must be >= 2")
        if self.pairs_per_subject < 1:
            raise ConfigError("pairs_per_subject must be >= 1")
        if self.image_size <= 0 or self.image_size % 8:
            raise ConfigError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if self.style not in THERMAL_STYLES:
            raise ConfigError(f"unknown style {self.style!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")


@dataclasses.dataclass(frozen=True)
class SubjectParams:
    head_a: float
    head_b: float
    skin: tuple
    hair: tuple
    hair_top: float
    hair_side: float
    eye_dx: float
    eye_y: float
    eye_rx: float
    eye_ry: float
    iris: tuple
    brow_gap: float
    brow_thick: float
    nose_len: float
    nose_w: float
    mouth_y: float
    mouth_w: float
    lip_thick: float
    lips: tuple


def subject_params(seed: int, subject: int) -> SubjectParams:
    r = np.random.default_rng([seed, 1, subject])
    u = lambda lo, hi: float(r.uniform(lo, hi))  # noqa: E731
    tone = u(0.35, 0.95)
    skin = (tone, tone * u(0.70, 0.85), tone * u(0.52, 0.70))
    shade = u(0.05, 0.75)
    hair = (shade, shade * u(0.6, 0.9), shade * u(0.3, 0.7))
    return SubjectParams(
        head_a=u(0.25, 0.34),
        head_b=u(0.33, 0.41),
        skin=skin,
        hair=hair,
        hair_top=u(0.03, 0.14),
        hair_side=u(0.0, 0.06),
        eye_dx=u(0.09, 0.14),
        eye_y=u(0.40, 0.47),
        eye_rx=u(0.035, 0.055),
        eye_ry=u(0.018, 0.03),
        iris=(u(0.05, 0.4), u(0.05, 0.35), u(0.05, 0.3)),
        brow_gap=u(0.045, 0.075),
        brow_thick=u(0.012, 0.025),
        nose_len=u(0.10, 0.16),
        nose_w=u(0.03, 0.055),
        mouth_y=u(0.67, 0.74),
        mouth_w=u(0.075, 0.13),
        lip_thick=u(0.015, 0.03),
        lips=(u(0.5, 0.85), u(0.15, 0.35), u(0.2, 0.4)),
    )


def _ellipse(x, y, cx, cy, rx, ry):
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0


def render_face(params: SubjectParams, size: int, rng: np.random.Generator):
    """Render one visible face in [0, 1] RGB plus its 11-class index mask."""
    shift_x, shift_y = rng.uniform(-0.03, 0.03, size=2)
    scale = rng.uniform(0.95, 1.05)
    mouth_open = rng.uniform(0.0, 0.025)
    gain = rng.uniform(0.9, 1.1)
    bg = rng.uniform(0.25, 0.85) * np.array([1.0, rng.uniform(0.9, 1.1), rng.uniform(0.85, 1.15)])

    coords = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(coords, coords, indexing="ij")
    # face-centred coordinates, undoing the per-sample shift and scale
    x = (x - 0.5 - shift_x) / scale + 0.5
    y = (y - 0.52 - shift_y) / scale + 0.52
    cx, cy = 0.5, 0.52
    p = params

    mask = np.full((size, size), CLS["background"], dtype=np.uint8)
    head = _ellipse(x, y, cx, cy, p.head_a, p.head_b)
    hair_region = _ellipse(x, y, cx, cy - p.hair_top / 2, p.head_a + p.hair_side, p.head_b + p.hair_top / 2)
    hairline = cy - p.head_b + p.hair_top + 0.06
    mask[hair_region & (y < cy + 0.05)] = CLS["hair"]
    mask[head & (y >= hairline)] = CLS["skin"]
    mask[head & (y < hairline) & ~hair_region] = CLS["skin"]

    for side, sign in (("left", -1), ("right", 1)):
        ex = cx + sign * p.eye_dx
        brow = _ellipse(x, y, ex, p.eye_y - p.brow_gap, p.eye_rx * 1.35, p.brow_thick)
        mask[brow] = CLS[f"{side}_brow"]
        mask[_ellipse(x, y, ex, p.eye_y, p.eye_rx, p.eye_ry)] = CLS[f"{side}_eye"]

    top = p.eye_y + 0.02
    t = (y - top) / p.nose_len
    nose = (t >= 0) & (t <= 1) & (np.abs(x - cx) <= p.nose_w * np.maximum(t, 0.25))
    mask[nose] = CLS["nose"]

    lip_box = _ellipse(x, y, cx, p.mouth_y, p.mouth_w, p.lip_thick + mouth_open / 2)
    mask[lip_box & (y < p.mouth_y)] = CLS["upper_lip"]
    mask[lip_box & (y >= p.mouth_y)] = CLS["lower_lip"]
    inner = lip_box & (np.abs(y - p.mouth_y) < mouth_open / 2) & (np.abs(x - cx) < p.mouth_w * 0.8)
    mask[inner] = CLS["inner_mouth"]

    palette = np.zeros((len(CLASS_NAMES), 3))
    palette[CLS["background"]] = bg
    palette[CLS["skin"]] = p.skin
    palette[CLS["hair"]] = p.hair
    palette[CLS["left_brow"]] = palette[CLS["right_brow"]] = np.array(p.hair) * 0.7
    palette[CLS["left_eye"]] = palette[CLS["right_eye"]] = p.iris
    palette[CLS["nose"]] = np.array(p.skin) * 0.82
    palette[CLS["upper_lip"]] = palette[CLS["lower_lip"]] = p.lips
    palette[CLS["inner_mouth"]] = (0.25, 0.05, 0.05)

    rgb = palette[mask] * gain
    sigma = 0.6 * size / 64
    rgb = np.stack([gaussian_filter(rgb[..., c], sigma, mode="nearest") for c in range(3)], axis=-1)
    rgb += rng.normal(0.0, 0.01, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0), mask


def thermal_from_visible(rgb: np.ndarray, style: str = "A") -> np.ndarray:
    """Single-channel pseudo-thermal intensity in [0, 1] from a visible render."""
    offset, gain, gamma, sigma = THERMAL_STYLES[style]
    lum = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    t = offset + gain * np.power(np.clip(lum, 0.0, 1.0), gamma)
    t = gaussian_filter(t, sigma * rgb.shape[0] / 64, mode="nearest")
    return np.clip(t, 0.0, 1.0)


def render_pair(config: SyntheticConfig, subject: int, sample: int):
    """Deterministic (thermal uint8 HxW, visible uint8 HxWx3, mask uint8 HxW)."""
    params = subject_params(config.seed, subject)
    rng = np.random.default_rng([config.seed, 2, subject, sample])
    rgb, mask = render_face(params, config.image_size, rng)
    visible = np.rint(rgb * 255).astype(np.uint8)
    thermal = np.rint(thermal_from_visible(visible / 255.0, config.style) * 255).astype(np.uint8)
    return thermal, visible, mask


def render_sample(config: SyntheticConfig, subject: int, sample: int) -> tuple[Image, Image, np.ndarray]:
    """In-memory variant of render_pair returning normalized Images."""
    thermal, visible, mask = render_pair(config, subject, sample)
    th = Image(to_unit_range(np.repeat(thermal[..., None], 3, axis=2)), THERMAL)
    return th, Image(to_unit_range(visible), VISIBLE), mask


def subject_id(index: int) -> str:
    return f"s{index:03d}"


def split_subjects(config: SyntheticConfig) -> dict[int, str]:
    if config.n_subjects < 4:
        warnings.warn(
            f"{config.n_subjects} subjects cannot be split disjointly; all go to train, test is empty",
            stacklevel=3,
        )
        return {i: "train" for i in range(config.n_subjects)}
    n_test = min(config.n_subjects - 1, max(1, round(config.n_subjects * config.test_fraction)))
    order = np.random.default_rng([config.seed, 3]).permutation(config.n_subjects)
    test = set(int(i) for i in order[:n_test])
    return {i: ("test" if i in test else "train") for i in range(config.n_subjects)}


def generate_synthetic_dataset(config: SyntheticConfig, out_dir) -> DatasetManifest:
    """Render the corpus to ``out_dir`` and write ``manifest.tsv`` and ``dataset.json``."""
    config.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory not writable: {out}: {exc}") from exc

    splits = split_subjects(config)
    entries = []
    for subj in range(config.n_subjects):
        sid = subject_id(subj)
        for k in range(config.pairs_per_subject):
            thermal, visible, mask = render_pair(config, subj, k)
            stem = f"images/{sid}_{k:02d}"
            th_img = Image(to_unit_range(np.repeat(thermal[..., None], 3, axis=2)), THERMAL)
            write_image(out / f"{stem}_thm.png", th_img)
            write_image(out / f"{stem}_vis.png", Image(to_unit_range(visible)))
            write_mask(out / f"{stem}_mask.png", mask)
            entries.append(
                ManifestEntry(splits[subj], sid, f"{stem}_thm.png", f"{stem}_vis.png", f"{stem}_mask.png")
            )
    manifest = DatasetManifest(entries, out)
    manifest.write(out / "manifest.tsv")
    (out / "dataset.json").write_text(json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d pairs for %d subjects to %s", len(entries), config.n_subjects, out)
    return manifest


def load_config(dataset_dir) -> SyntheticConfig:
    return SyntheticConfig(**json.loads((Path(dataset_dir) / "dataset.json").read_text()))
