import copy
import dataclasses
import logging

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sggan import checkpoint
from sggan.data import batch_tensors
from sggan.errors import ConfigError, LoadError, TrainingError
from sggan.losses import LossWeights, pixel_loss
from sggan.networks import network_tensors
from sggan.trainer import (
    TrainConfig,
    fine_tune,
    init_fine_tune,
    load_model,
    lr_schedule,
    new_state,
    read_loss_log,
    resume,
    save_model,
    train,
    train_step,
)


def _cfg(**kw):
    return TrainConfig.desk(epochs=kw.pop("epochs", 4), image_size=32, **kw)


def _checksums(net):
    return checkpoint.state_checksum(network_tensors(net))


# ---------------------------------------------------------------------------
# schedule and config


def test_schedule_defaults_exact():
    cfg = TrainConfig()
    assert all(lr_schedule(e, cfg) == 2e-4 for e in range(1, 101))
    assert lr_schedule(150, cfg) == 1e-4
    assert lr_schedule(200, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_schedule(0, cfg)
    with pytest.raises(ValueError):
        lr_schedule(201, cfg)


@settings(max_examples=50, deadline=None)
@given(epochs=st.integers(1, 400), frac=st.floats(0, 1))
def test_schedule_non_increasing_and_continuous(epochs, frac):
    cfg = TrainConfig(epochs=epochs, decay_start=int(frac * epochs))
    values = [lr_schedule(e, cfg) for e in range(1, epochs + 1)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert values[-1] == (0.0 if cfg.decay_start < epochs else cfg.lr0)
    if 1 <= cfg.decay_start < epochs:
        step = cfg.lr0 / (epochs - cfg.decay_start)
        assert values[cfg.decay_start - 1] - values[cfg.decay_start] == pytest.approx(step)


def test_config_validation():
    for bad in (dict(epochs=0), dict(lr0=0.0), dict(decay_start=300), dict(crop_size=300),
                dict(grouping="nope"), dict(lambda_s=-1.0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_config_text_round_trip_and_unknown_key(tmp_path):
    cfg = _cfg(lambda_s=20.0, flip=False)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    (tmp_path / "c.cfg").write_text("epochs = 3\n# comment\nbogus_key = 1\n")
    with pytest.raises(ConfigError, match="bogus_key"):
        TrainConfig.from_file(tmp_path / "c.cfg")
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig.from_text("epochs = many")


# ---------------------------------------------------------------------------
# one step


def test_step_updates_both_networks_and_not_frozen_ones(small_train, tiny_nets):
    state = new_state(_cfg())
    frozen = [_checksums(n) for n in (tiny_nets.identity, tiny_nets.perceptual, tiny_nets.parser)]
    g0, d0 = _checksums(state.G), _checksums(state.D)
    report = train_step(state, small_train[:2], tiny_nets)
    assert _checksums(state.G) != g0 and _checksums(state.D) != d0
    assert frozen == [_checksums(n) for n in (tiny_nets.identity, tiny_nets.perceptual, tiny_nets.parser)]
    expected = sum(state.cfg.weights.for_term(t) * getattr(report, t)
                   for t in ("gan_g", "pixel", "perceptual", "identity", "semantic"))
    assert report.total == pytest.approx(expected, abs=1e-6)


def test_pixel_only_update_equals_l1_regression_gradient(small_train, tiny_nets):
    cfg = _cfg().with_weights(LossWeights(0.0, 100.0, 0.0, 0.0, 0.0))
    state = new_state(cfg)
    reference = copy.deepcopy(state.G)
    batch = small_train[:2]
    torch.manual_seed(11)
    train_step(state, batch, tiny_nets)
    step_grads = [p.grad.clone() for p in state.G.parameters()]

    x, y, _ = batch_tensors(batch)
    reference.train()
    torch.manual_seed(11)  # same dropout masks
    (100.0 * pixel_loss(reference(x), y)).backward()
    for a, p in zip(step_grads, reference.parameters()):
        assert torch.allclose(a, p.grad, rtol=1e-5, atol=1e-8)


def test_non_finite_loss_aborts(small_train, tiny_nets, monkeypatch):
    state = new_state(_cfg())
    monkeypatch.setattr("sggan.trainer.pixel_loss", lambda f, t: (f - t).abs().mean() * float("nan"))
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(state, small_train[:1], tiny_nets)


# ---------------------------------------------------------------------------
# full runs


def test_train_writes_log_and_checkpoints(tmp_path, small_dataset, tiny_nets):
    cfg = _cfg(epochs=4, checkpoint_every=2)
    state = train(cfg, small_dataset, tiny_nets, tmp_path)
    log = read_loss_log(tmp_path / "loss_log.jsonl")
    assert len(log) == 4 == len(state.history)
    assert [r["epoch"] for r in log] == [1, 2, 3, 4]
    for rec in log:
        assert set(rec) == {"epoch", "lr", "gan_d", "gan_g", "pixel", "perceptual", "identity", "semantic", "total"}
        recombined = sum(cfg.weights.for_term(t) * rec[t]
                         for t in ("gan_g", "pixel", "perceptual", "identity", "semantic"))
        assert rec["total"] == pytest.approx(recombined, abs=1e-6)
    assert (tmp_path / "ckpt_e0002.sggan").exists() and (tmp_path / "final.sggan").exists()
    G, D, meta = load_model(tmp_path / "final.sggan")
    assert checkpoint.state_checksum(network_tensors(G)) == _checksums(state.G)


def test_empty_split_is_config_error(tiny_nets):
    with pytest.raises(ConfigError):
        train(_cfg(), [], tiny_nets)


def test_identical_seeds_identical_checkpoints(tmp_path, small_train, tiny_nets):
    cfg = _cfg(epochs=2)
    train(cfg, small_train, tiny_nets, tmp_path / "a")
    train(cfg, small_train, tiny_nets, tmp_path / "b")
    assert (tmp_path / "a/final.sggan").read_bytes() == (tmp_path / "b/final.sggan").read_bytes()
    train(dataclasses.replace(cfg, seed=1), small_train, tiny_nets, tmp_path / "c")
    assert (tmp_path / "a/final.sggan").read_bytes() != (tmp_path / "c/final.sggan").read_bytes()


def test_interrupt_and_resume_is_bit_identical(tmp_path, small_train, tiny_nets):
    cfg = _cfg(epochs=4)
    train(cfg, small_train, tiny_nets, tmp_path / "full")
    train(cfg, small_train, tiny_nets, tmp_path / "part", stop_after=2)
    assert not (tmp_path / "part/final.sggan").exists()
    state = resume(tmp_path / "part/state.sggan")
    assert state.epoch == 2 and len(state.history) == 2
    train(None, small_train, tiny_nets, tmp_path / "part", state=state)
    for name in ("final.sggan", "state.sggan", "loss_log.jsonl"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_resume_completed_run_is_noop(tmp_path, small_train, tiny_nets, caplog):
    cfg = _cfg(epochs=1)
    train(cfg, small_train, tiny_nets, tmp_path)
    before = (tmp_path / "state.sggan").read_bytes()
    state = resume(tmp_path / "state.sggan")
    with caplog.at_level(logging.WARNING, logger="sggan.trainer"):
        after = train(None, small_train, tiny_nets, tmp_path, state=state)
    assert "already complete" in caplog.text
    assert after.epoch == 1 and (tmp_path / "state.sggan").read_bytes() == before


def test_corrupted_state_is_load_error(tmp_path, small_train, tiny_nets):
    train(_cfg(epochs=1), small_train, tiny_nets, tmp_path)
    blob = bytearray((tmp_path / "state.sggan").read_bytes())
    blob[-10] ^= 0xFF
    (tmp_path / "bad.sggan").write_bytes(bytes(blob))
    with pytest.raises(LoadError):
        resume(tmp_path / "bad.sggan")
    (tmp_path / "short.sggan").write_bytes(bytes(blob[:40]))
    with pytest.raises(LoadError):
        resume(tmp_path / "short.sggan")
    with pytest.raises(LoadError):
        resume(tmp_path / "final.sggan")  # a model file is not a training state


# ---------------------------------------------------------------------------
# fine-tuning


@pytest.fixture(scope="module")
def base_ckpt(tmp_path_factory, small_train, tiny_nets):
    out = tmp_path_factory.mktemp("base")
    train(_cfg(epochs=1), small_train, tiny_nets, out)
    return out / "final.sggan"


def test_fine_tune_initialization_checksums(base_ckpt):
    base_g, base_d, _ = load_model(base_ckpt)
    cfg = _cfg(seed=7)
    g_only = init_fine_tune(base_ckpt, "G_only", cfg)
    assert _checksums(g_only.G) == _checksums(base_g)
    assert _checksums(g_only.D) != _checksums(base_d)
    assert _checksums(g_only.D) == _checksums(new_state(cfg).D)  # fresh, seeded from cfg
    both = init_fine_tune(base_ckpt, "G_and_D", cfg)
    assert _checksums(both.G) == _checksums(base_g) and _checksums(both.D) == _checksums(base_d)
    assert g_only.provenance["discriminator"] == "fresh"
    assert both.provenance["discriminator"] == "base"
    assert g_only.provenance["base_sha256"] == checkpoint.file_digest(base_ckpt)


def test_fine_tune_updates_both_networks_and_records_provenance(tmp_path, base_ckpt, small_train, tiny_nets):
    state = fine_tune(base_ckpt, small_train, "G_only", _cfg(epochs=1), tiny_nets, tmp_path)
    _, _, meta = load_model(tmp_path / "final.sggan")
    assert meta["provenance"]["strategy"] == "G_only"
    base_g, base_d, _ = load_model(base_ckpt)
    assert _checksums(state.G) != _checksums(base_g)


def test_fine_tune_errors(base_ckpt):
    with pytest.raises(ConfigError):
        init_fine_tune(base_ckpt, "D_only", _cfg())
    with pytest.raises(LoadError):
        init_fine_tune(base_ckpt, "G_only", _cfg(ngf=8))


def test_model_round_trip(tmp_path, small_train, tiny_nets):
    state = new_state(_cfg())
    save_model(tmp_path / "m.sggan", state)
    G, D, meta = load_model(tmp_path / "m.sggan")
    assert _checksums(G) == _checksums(state.G) and _checksums(D) == _checksums(state.D)
    assert meta["config"] == dataclasses.asdict(state.cfg)
