import hashlib
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image as PILImage

from sggan.data import (
    CLASS_NAMES,
    NUM_CLASSES,
    SALIENT_CLASSES,
    THERMAL,
    AugmentParams,
    DatasetManifest,
    Image,
    LabelGrouping,
    ManifestEntry,
    PairedSample,
    augment,
    group_labels,
    load_pair,
    one_hot,
    sample_rng,
    to_uint8,
    to_unit_range,
)
from sggan.errors import AlignmentError, ConfigError, IngestError, ShapeError
from sggan.synthetic import SyntheticConfig, generate_synthetic_dataset


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_affine_map_endpoints():
    raw = np.array([0, 128, 255], dtype=np.uint8)
    out = to_unit_range(raw)
    assert out[0] == -1.0
    assert out[2] == 1.0
    assert out[1] == pytest.approx(2 * 128 / 255 - 1, abs=1e-7)
    assert out[1] == pytest.approx(0.0039215686, abs=1e-7)


def test_uint8_round_trip_exact():
    raw = np.arange(256, dtype=np.uint8)
    assert np.array_equal(to_uint8(to_unit_range(raw)), raw)


def test_load_pair_round_trip_and_greyscale_replication(tmp_path, rng):
    vis = rng.integers(0, 256, size=(8, 12, 3), dtype=np.uint8)
    thm = rng.integers(0, 256, size=(8, 12), dtype=np.uint8)
    PILImage.fromarray(vis).save(tmp_path / "v.png")
    PILImage.fromarray(thm, mode="L").save(tmp_path / "t.png")
    pair = load_pair(ManifestEntry("train", "s1", "t.png", "v.png"), tmp_path)
    assert pair.thermal.color_space == THERMAL
    p = pair.thermal.pixels
    assert np.array_equal(p[..., 0], p[..., 1]) and np.array_equal(p[..., 1], p[..., 2])
    assert np.array_equal(to_uint8(pair.visible.pixels), vis)
    assert np.array_equal(to_uint8(p[..., 0]), thm)


def test_load_pair_errors(tmp_path):
    PILImage.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "v.png")
    PILImage.fromarray(np.zeros((12, 8), np.uint8)).save(tmp_path / "t.png")
    with pytest.raises(IngestError, match="missing.png"):
        load_pair(ManifestEntry("train", "s", "missing.png", "v.png"), tmp_path)
    with pytest.raises(AlignmentError):
        load_pair(ManifestEntry("train", "s", "t.png", "v.png"), tmp_path)


def test_image_invariants():
    with pytest.raises(ShapeError):
        Image(np.zeros((6, 8, 3), np.float32))
    with pytest.raises(ValueError):
        Image(np.full((4, 4, 3), 1.5, np.float32))
    bad = np.zeros((4, 4, 3), np.float32)
    bad[..., 1] = 0.5
    with pytest.raises(ValueError):
        Image(bad, THERMAL)


def test_manifest_round_trip_and_validation(tmp_path):
    entries = [
        ManifestEntry("train", "a", "a_t.png", "a_v.png", "a_m.png"),
        ManifestEntry("test", "b", "b_t.png", "b_v.png", None),
    ]
    DatasetManifest(entries, tmp_path).write(tmp_path / "manifest.tsv")
    lines = (tmp_path / "manifest.tsv").read_text().splitlines()
    assert lines[1] == "test\tb\tb_t.png\tb_v.png\t-"
    back = DatasetManifest.read(tmp_path)
    assert back.entries == entries
    with pytest.raises(ConfigError):
        DatasetManifest(entries + [ManifestEntry("test", "a", "x.png", "y.png")])
    with pytest.raises(ConfigError):
        DatasetManifest(entries + [ManifestEntry("train", "c", "a_t.png", "c.png")])


def _pair(h=32, w=32, seed=0):
    r = np.random.default_rng(seed)
    vis = r.uniform(-1, 1, size=(h, w, 3)).astype(np.float32)
    thm = np.repeat(r.uniform(-1, 1, size=(h, w, 1)), 3, axis=2).astype(np.float32)
    mask = r.integers(0, NUM_CLASSES, size=(h, w)).astype(np.uint8)
    return PairedSample(Image(thm, THERMAL), Image(vis), "s0", mask)


def test_augment_forced_window_without_flip():
    pair = _pair(64, 64)
    p = AugmentParams(load_size=64, crop_size=56, top=0, left=0, flip=False)
    out = augment(pair, params=p)
    assert np.array_equal(out.visible.pixels, pair.visible.pixels[:56, :56])
    assert np.array_equal(out.semantic_truth, pair.semantic_truth[:56, :56])
    assert out.transform == p


def test_augment_default_sizes_top_left_window():
    pair = _pair(256, 256)
    out = augment(pair, params=AugmentParams(286, 256, 0, 0, False))
    assert out.visible.height == out.visible.width == 256
    from sggan.data import _resize

    rescaled = _resize(pair.visible.pixels, 286)
    assert np.array_equal(out.visible.pixels, rescaled[:256, :256])


def test_augment_flip_maps_columns():
    pair = _pair(32, 32)
    out = augment(pair, params=AugmentParams(32, 32, 0, 0, True))
    w = 32
    for c in (0, 5, 31):
        assert np.array_equal(out.visible.pixels[:, c], pair.visible.pixels[:, w - 1 - c])
        assert np.array_equal(out.thermal.pixels[:, c], pair.thermal.pixels[:, w - 1 - c])
        assert np.array_equal(out.semantic_truth[:, c], pair.semantic_truth[:, w - 1 - c])


def test_augment_crop_larger_than_rescale():
    with pytest.raises(ConfigError):
        augment(_pair(), sample_rng(0), load_size=32, crop_size=40)


def test_augment_seed_replay_is_bit_identical():
    pair = _pair(64, 64)
    a = augment(pair, sample_rng(7), 72, 64)
    b = augment(pair, sample_rng(7), 72, 64)
    assert a.transform == b.transform
    assert np.array_equal(a.visible.pixels, b.visible.pixels)
    assert np.array_equal(a.thermal.pixels, b.thermal.pixels)
    assert np.array_equal(a.semantic_truth, b.semantic_truth)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_augment_preserves_alignment(seed):
    # a pair whose three rasters encode the same column/row index stays consistent
    h = w = 32
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    code = ((rows * w + cols) % NUM_CLASSES).astype(np.uint8)
    vis = np.stack([code / 10.0 * 2 - 1] * 3, -1).astype(np.float32)
    pair = PairedSample(Image(vis.copy(), THERMAL), Image(vis), "s", code)
    out = augment(pair, sample_rng(seed), load_size=32, crop_size=24)
    assert np.array_equal(out.thermal.pixels, out.visible.pixels)
    expected = np.rint((out.visible.pixels[..., 0] + 1) / 2 * 10).astype(np.uint8)
    assert np.array_equal(expected, out.semantic_truth)


# ---------------------------------------------------------------------------
# label grouping


def test_grouping_identity_is_noop(rng):
    probs = rng.dirichlet(np.ones(NUM_CLASSES), size=(4, 5)).transpose(2, 0, 1)
    out = group_labels(probs, LabelGrouping.identity())
    assert np.allclose(out, probs)


def test_two_class_grouping_nose_goes_salient():
    mask = np.full((2, 2), CLASS_NAMES.index("nose"), np.uint8)
    out = group_labels(one_hot(mask), LabelGrouping.two_class())
    assert out.shape == (2, 2, 2)
    assert np.array_equal(out[1], np.ones((2, 2)))
    assert np.array_equal(out[0], np.zeros((2, 2)))
    g = LabelGrouping.two_class()
    assert {CLASS_NAMES[i] for i, k in enumerate(g.mapping) if k == 1} == set(SALIENT_CLASSES)


def test_grouping_table_must_be_total():
    with pytest.raises(ConfigError):
        LabelGrouping((0, 1) * 5)
    with pytest.raises(ConfigError):
        LabelGrouping((0,) * 10 + (2,))
    with pytest.raises(ConfigError):
        LabelGrouping((0,) * 11)
    with pytest.raises(ConfigError):
        group_labels(np.zeros((5, 2, 2)), LabelGrouping.two_class())


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    mapping=st.lists(st.integers(0, 3), min_size=NUM_CLASSES, max_size=NUM_CLASSES),
)
def test_grouping_conserves_probability(seed, mapping):
    # relabel to a dense 0..K-1 range
    dense = {v: i for i, v in enumerate(sorted(set(mapping)))}
    mapping = tuple(dense[v] for v in mapping)
    if len(set(mapping)) < 2:
        mapping = (0,) * 10 + (1,)
    probs = np.random.default_rng(seed).dirichlet(np.ones(NUM_CLASSES), size=(3, 4)).transpose(2, 0, 1)
    out = group_labels(probs, LabelGrouping(mapping))
    assert np.allclose(out.sum(0), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# synthetic corpus


def test_synthetic_determinism(tmp_path):
    cfg = SyntheticConfig(n_subjects=4, pairs_per_subject=2, image_size=32, seed=3)
    generate_synthetic_dataset(cfg, tmp_path / "a")
    generate_synthetic_dataset(cfg, tmp_path / "b")
    assert (tmp_path / "a/manifest.tsv").read_bytes() == (tmp_path / "b/manifest.tsv").read_bytes()
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_synthetic_degenerate_split_warns(tmp_path):
    cfg = SyntheticConfig(n_subjects=2, pairs_per_subject=1, image_size=16, seed=0)
    with pytest.warns(UserWarning, match="cannot be split"):
        m = generate_synthetic_dataset(cfg, tmp_path)
    assert len(m) == 2
    assert {e.split for e in m.entries} == {"train"}
    assert len(m.select("test")) == 0


@pytest.mark.parametrize("n", [4, 5, 9, 16])
def test_synthetic_split_disjoint(tmp_path, n):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        m = generate_synthetic_dataset(SyntheticConfig(n_subjects=n, pairs_per_subject=1, image_size=16), tmp_path)
    assert m.subjects("train") and m.subjects("test")
    assert not m.subjects("train") & m.subjects("test")


def test_synthetic_masks_contain_background_and_skin(small_dataset):
    for e in small_dataset.entries:
        pair = load_pair(e, small_dataset.root)
        hist = np.bincount(pair.semantic_truth.ravel(), minlength=NUM_CLASSES)
        assert hist[CLASS_NAMES.index("background")] > 0
        assert hist[CLASS_NAMES.index("skin")] > 0


def test_synthetic_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SyntheticConfig(n_subjects=1), tmp_path)
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SyntheticConfig(image_size=60), tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_synthetic_dataset(SyntheticConfig(n_subjects=2, image_size=16), blocker / "sub")
