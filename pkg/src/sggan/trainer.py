"""Alternating D/G optimization with checkpointing, loss logging, resume and fine-tuning."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from sggan import checkpoint
from sggan.data import LabelGrouping, PairedSample, augment, batch_tensors, load_split, sample_rng
from sggan.errors import ConfigError, LoadError, TrainingError
from sggan.losses import (
    TERMS,
    LossReport,
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    composite_loss,
    feature_loss,
    parsed_semantic_loss,
    pixel_loss,
    weighted_total,
)
from sggan.networks import (
    GeneratorSpec,
    PatchDiscriminator,
    UNetGenerator,
    build_discriminator,
    build_generator,
    instantiate,
    load_into,
    network_tensors,
)
from sggan.stubs import StubNetworks

logger = logging.getLogger(__name__)

STATE_FORMAT = "sggan-train-state/1"
MODEL_FORMAT = "sggan-model/1"
STRATEGIES = ("G_and_D", "G_only")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr0: float = 2e-4
    decay_start: int = 100
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_g: float = 1.0
    lambda_r: float = 100.0
    lambda_p: float = 10.0
    lambda_i: float = 20.0
    lambda_s: float = 1.0
    load_size: int = 286
    crop_size: int = 256
    flip: bool = True
    checkpoint_every: int = 25
    ngf: int = 64
    ndf: int = 64
    depth: int = 0  # 0 = deepest U-Net for crop_size
    dropout: float = 0.5
    grouping: str = "two_class"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if not 0 <= self.decay_start <= self.epochs:
            raise ConfigError(f"decay_start must be in [0, epochs={self.epochs}], got {self.decay_start}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.crop_size > self.load_size:
            raise ConfigError(f"crop_size {self.crop_size} exceeds load_size {self.load_size}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        LabelGrouping.named(self.grouping)
        self.weights  # validates lambdas

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_g, self.lambda_r, self.lambda_p, self.lambda_i, self.lambda_s)

    def with_weights(self, w: LossWeights) -> "TrainConfig":
        return dataclasses.replace(self, **dataclasses.asdict(w))

    @property
    def generator_spec(self) -> GeneratorSpec:
        if self.depth:
            return GeneratorSpec(depth=self.depth, base_channels=self.ngf, dropout_rate=self.dropout)
        return GeneratorSpec.for_image_size(self.crop_size, self.ngf, dropout_rate=self.dropout)

    @classmethod
    def desk(cls, epochs: int = 30, image_size: int = 64, **kw) -> "TrainConfig":
        """Small-image preset: narrow networks, rescale by 9/8 then crop back, decay over the second half."""
        base = dict(epochs=epochs, decay_start=epochs // 2, load_size=image_size + image_size // 8,
                    crop_size=image_size, ngf=16, ndf=16, checkpoint_every=max(1, epochs))
        base.update(kw)
        return cls(**base)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        base = base or cls()
        fields = {f.name: f for f in dataclasses.fields(cls)}
        updates = {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key: {key}")
            default = getattr(base, key)
            updates[key] = _coerce(key, raw, type(default))
        return dataclasses.replace(base, **updates)

    @classmethod
    def from_text(cls, text: str, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        return cls.from_mapping(parse_flat_config(text), base)

    @classmethod
    def from_file(cls, path, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)


def parse_flat_config(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return typ(raw)
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant lr0 through decay_start, then linear decay reaching 0 at the last epoch."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if epoch <= cfg.decay_start:
        return cfg.lr0
    return cfg.lr0 * (1.0 - (epoch - cfg.decay_start) / (cfg.epochs - cfg.decay_start))


# ---------------------------------------------------------------------------
# state


@dataclasses.dataclass
class TrainState:
    cfg: TrainConfig
    G: UNetGenerator
    D: PatchDiscriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: torch.Tensor
    epoch: int = 0
    history: list = dataclasses.field(default_factory=list)
    provenance: dict = dataclasses.field(default_factory=dict)


def _seeds(seed: int) -> tuple[int, int, int]:
    return seed * 3 + 1, seed * 3 + 2, seed * 3 + 3


def _optimizers(cfg: TrainConfig, G, D):
    betas = (cfg.beta1, cfg.beta2)
    return (torch.optim.Adam(G.parameters(), lr=cfg.lr0, betas=betas),
            torch.optim.Adam(D.parameters(), lr=cfg.lr0, betas=betas))


def new_state(cfg: TrainConfig) -> TrainState:
    g_seed, d_seed, rng_seed = _seeds(cfg.seed)
    G = build_generator(cfg.generator_spec, g_seed)
    D = build_discriminator(d_seed, ndf=cfg.ndf)
    opt_g, opt_d = _optimizers(cfg, G, D)
    gen = torch.Generator().manual_seed(rng_seed)
    return TrainState(cfg, G, D, opt_g, opt_d, gen.get_state(), provenance={"generator": "fresh", "discriminator": "fresh"})


def _set_lr(state: TrainState, lr: float) -> None:
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr


def _opt_tensors(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict, list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"{prefix}/{idx}/{k}"] = v if isinstance(v, torch.Tensor) else torch.tensor(v)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, groups


def _opt_restore(opt: torch.optim.Optimizer, tensors: dict, prefix: str, groups: list) -> None:
    state: dict = {}
    for name, v in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = v
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in groups]
    opt.load_state_dict({"state": state, "param_groups": groups})


def model_meta(state: TrainState) -> dict:
    return {
        "format": MODEL_FORMAT,
        "generator": state.G.arch(),
        "discriminator": state.D.arch(),
        "epoch": state.epoch,
        "config": dataclasses.asdict(state.cfg),
        "provenance": state.provenance,
    }


def save_model(path, state: TrainState) -> None:
    tensors = {**network_tensors(state.G, "G/"), **network_tensors(state.D, "D/")}
    checkpoint.save(path, tensors, model_meta(state))


def load_model(path) -> tuple[UNetGenerator, PatchDiscriminator, dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("format") not in (MODEL_FORMAT, STATE_FORMAT):
        raise LoadError(f"{path} is not a trained model checkpoint")
    G = instantiate("UNetGenerator", meta["generator"])
    D = instantiate("PatchDiscriminator", meta["discriminator"])
    load_into(G, tensors, "G/")
    load_into(D, tensors, "D/")
    return G.eval(), D.eval(), meta


def save_state(path, state: TrainState) -> None:
    tensors = {**network_tensors(state.G, "G/"), **network_tensors(state.D, "D/"), "rng": state.rng}
    tg, groups_g = _opt_tensors(state.opt_g, "opt_g")
    td, groups_d = _opt_tensors(state.opt_d, "opt_d")
    tensors.update(tg)
    tensors.update(td)
    meta = {**model_meta(state), "format": STATE_FORMAT, "history": state.history,
            "opt_g_groups": groups_g, "opt_d_groups": groups_d}
    checkpoint.save(path, tensors, meta)


def resume(state_file) -> TrainState:
    """Rebuild a TrainState exactly as it was saved; raises LoadError without side effects."""
    tensors, meta = checkpoint.load(state_file)
    if meta.get("format") != STATE_FORMAT:
        raise LoadError(f"{state_file}: unsupported state format {meta.get('format')!r}, expected {STATE_FORMAT}")
    try:
        cfg = TrainConfig(**meta["config"])
        G = instantiate("UNetGenerator", meta["generator"])
        D = instantiate("PatchDiscriminator", meta["discriminator"])
        load_into(G, tensors, "G/")
        load_into(D, tensors, "D/")
        opt_g, opt_d = _optimizers(cfg, G, D)
        _opt_restore(opt_g, tensors, "opt_g", meta["opt_g_groups"])
        _opt_restore(opt_d, tensors, "opt_d", meta["opt_d_groups"])
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise LoadError(f"{state_file}: incompatible training state: {exc}") from exc
    return TrainState(cfg, G, D, opt_g, opt_d, tensors["rng"], meta["epoch"], meta["history"], meta["provenance"])


# ---------------------------------------------------------------------------
# optimization


def generator_terms(fake: torch.Tensor, target: torch.Tensor, nets: StubNetworks,
                    grouping: LabelGrouping, weights: LossWeights) -> dict[str, torch.Tensor]:
    """Per-pixel, perceptual, identity and semantic terms.

    Terms with zero weight are still computed for the log, but without a graph.
    """
    specs = {
        "pixel": lambda: pixel_loss(fake, target),
        "perceptual": lambda: feature_loss(nets.perceptual, fake, target),
        "identity": lambda: feature_loss(nets.identity, fake, target),
        "semantic": lambda: parsed_semantic_loss(nets.parser, fake, target, grouping),
    }
    terms = {}
    for name, fn in specs.items():
        if weights.for_term(name) > 0:
            terms[name] = fn()
        else:
            with torch.no_grad():
                terms[name] = fn()
    return terms


def train_step(state: TrainState, batch: Sequence[PairedSample], nets: StubNetworks,
               grouping: Optional[LabelGrouping] = None) -> LossReport:
    """One discriminator update followed by one generator update."""
    cfg = state.cfg
    w = cfg.weights
    grouping = grouping or LabelGrouping.named(cfg.grouping)
    x, y, _ = batch_tensors(batch)
    G, D = state.G, state.D
    G.train()
    D.train()

    fake = G(x)

    for p in D.parameters():
        p.requires_grad_(True)
    loss_d = adversarial_d_loss(D(x, y), D(x, fake.detach()))
    if not torch.isfinite(loss_d):
        raise TrainingError(f"non-finite discriminator loss at epoch {state.epoch + 1}: {float(loss_d)}")
    state.opt_d.zero_grad()
    loss_d.backward()
    state.opt_d.step()

    for p in D.parameters():
        p.requires_grad_(False)
    terms = generator_terms(fake, y, nets, grouping, w)
    if w.lambda_g > 0:
        terms["gan_g"] = adversarial_g_loss(D(x, fake))
    else:
        with torch.no_grad():
            terms["gan_g"] = adversarial_g_loss(D(x, fake))
    for p in D.parameters():
        p.requires_grad_(True)
    values = {k: float(v.detach()) for k, v in terms.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingError(f"non-finite generator loss at epoch {state.epoch + 1}: {values}")
    total = weighted_total({k: v for k, v in terms.items() if w.for_term(k) > 0}, w)
    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step()
    return composite_loss({"gan_d": float(loss_d.detach()), **values}, w)


def epoch_record(epoch: int, lr: float, reports: Sequence[LossReport], w: LossWeights) -> dict:
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("gan_d",) + TERMS}
    report = composite_loss(means, w)
    return {"epoch": epoch, "lr": lr, **report.as_dict()}


def write_loss_log(path, history: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_loss_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def train(cfg: Optional[TrainConfig], data, nets: StubNetworks, out_dir=None,
          state: Optional[TrainState] = None, stop_after: Optional[int] = None) -> TrainState:
    """Run (or continue) training.

    ``data`` is a DatasetManifest or an already-loaded list of train samples.
    With ``out_dir`` set, the state file and loss log are rewritten every epoch and
    model checkpoints are written at the configured cadence and at the end.
    ``stop_after`` simulates an interruption after that epoch.
    """
    if state is None:
        state = new_state(cfg)
    cfg = state.cfg
    samples = data if isinstance(data, list) else load_split(data, "train")
    if not samples:
        raise ConfigError("train split is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if state.epoch >= cfg.epochs:
        logger.warning("training already complete at epoch %d; nothing to do", state.epoch)
        return state

    grouping = LabelGrouping.named(cfg.grouping)
    w = cfg.weights
    with torch.random.fork_rng(devices=[]):
        for epoch in range(state.epoch + 1, cfg.epochs + 1):
            torch.set_rng_state(state.rng)
            lr = lr_schedule(epoch, cfg)
            _set_lr(state, lr)
            order = sample_rng(cfg.seed, epoch).permutation(len(samples))
            reports = []
            for start in range(0, len(samples), cfg.batch_size):
                batch = [
                    augment(samples[i], sample_rng(cfg.seed, epoch, int(i)), cfg.load_size, cfg.crop_size, cfg.flip)
                    for i in order[start : start + cfg.batch_size]
                ]
                reports.append(train_step(state, batch, nets, grouping))
            state.history.append(epoch_record(epoch, lr, reports, w))
            state.epoch = epoch
            state.rng = torch.get_rng_state()
            logger.info("epoch %d lr %.2e total %.4f", epoch, lr, state.history[-1]["total"])
            if out is not None:
                save_state(out / "state.sggan", state)
                write_loss_log(out / "loss_log.jsonl", state.history)
                if epoch % cfg.checkpoint_every == 0 and epoch != cfg.epochs:
                    save_model(out / f"ckpt_e{epoch:04d}.sggan", state)
                if epoch == cfg.epochs:
                    save_model(out / "final.sggan", state)
            if stop_after is not None and epoch >= stop_after:
                break
    return state


def init_fine_tune(base, strategy: str, cfg: TrainConfig) -> TrainState:
    """Fresh state whose G (and, for G_and_D, D) is copied from ``base``."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    tensors, meta = checkpoint.load(base)
    if meta.get("format") not in (MODEL_FORMAT, STATE_FORMAT):
        raise LoadError(f"{base} is not a trained model checkpoint")
    state = new_state(cfg)
    if meta["generator"] != state.G.arch():
        raise LoadError(f"generator architecture differs: base {meta['generator']} vs config {state.G.arch()}")
    load_into(state.G, tensors, "G/")
    if strategy == "G_and_D":
        if meta["discriminator"] != state.D.arch():
            raise LoadError(
                f"discriminator architecture differs: base {meta['discriminator']} vs config {state.D.arch()}"
            )
        load_into(state.D, tensors, "D/")
    state.provenance = {
        "strategy": strategy,
        "base_sha256": checkpoint.file_digest(base),
        "generator": "base",
        "discriminator": "base" if strategy == "G_and_D" else "fresh",
    }
    return state


def fine_tune(base, data, strategy: str, cfg: TrainConfig, nets: StubNetworks, out_dir=None) -> TrainState:
    """Continue training from ``base`` on new data; both networks keep updating every step."""
    return train(cfg, data, nets, out_dir, state=init_fine_tune(base, strategy, cfg))
