"""Desk-scale experiments on the synthetic corpus.

Shared by the runnable scripts and the acceptance suite. Every experiment writes its
corpora and artifacts under one root directory; stand-in networks are trained once
and reused from ``root/nets`` and ``root/matcher.sggan`` when present.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from sggan.data import DatasetManifest, load_split
from sggan.evaluation import (
    TABLE_I,
    AblationConfig,
    AblationResult,
    emit_convergence_plot,
    epochs_to_reach,
    held_out_pixel_loss,
    run_ablation,
)
from sggan.networks import FeatureNetwork, load_network, save_network
from sggan.stubs import StubNetworks, train_matcher, train_stub_networks
from sggan.synthetic import SyntheticConfig, generate_synthetic_dataset
from sggan.trainer import STRATEGIES, TrainConfig, fine_tune, new_state, train

logger = logging.getLogger(__name__)

FEATURE_CORPUS = SyntheticConfig(n_subjects=24, pairs_per_subject=12, seed=100, test_fraction=0.1)
SMOKE_CORPUS = SyntheticConfig(n_subjects=12, pairs_per_subject=4, seed=1)
ABLATION_CORPUS = SyntheticConfig(n_subjects=20, pairs_per_subject=4, seed=2)
TRANSFER_BASE = SyntheticConfig(n_subjects=16, pairs_per_subject=4, seed=3, style="A")
TRANSFER_TARGET = SyntheticConfig(n_subjects=16, pairs_per_subject=8, seed=4, style="B")

ABLATION_CONFIGS = (TABLE_I[0], TABLE_I[2], TABLE_I[3])  # GAN+R, GAN+R+P+I, SG-GAN


@dataclasses.dataclass
class Desk:
    root: Path
    nets: StubNetworks
    matcher: FeatureNetwork


def corpus(root, config: SyntheticConfig, name: str) -> DatasetManifest:
    """Generate ``config`` under root/name, or reuse it if already there."""
    path = Path(root) / name
    if (path / "manifest.tsv").exists():
        return DatasetManifest.read(path)
    return generate_synthetic_dataset(config, path)


def prepare(root, seed: int = 0) -> Desk:
    """Stand-in networks and matcher trained on a dedicated feature corpus."""
    root = Path(root)
    features = corpus(root, FEATURE_CORPUS, "features")
    if (root / "nets/identity.sggan").exists():
        nets = StubNetworks.load(root / "nets")
    else:
        train_stub_networks(features, seed=seed, out_dir=root / "nets")
        nets = StubNetworks.load(root / "nets")  # reload so runs see the stored bytes
    if (root / "matcher.sggan").exists():
        matcher, _ = load_network(root / "matcher.sggan", "FeatureNetwork")
    else:
        save_network(root / "matcher.sggan", train_matcher(features, seed=seed), role="matcher")
        matcher, _ = load_network(root / "matcher.sggan", "FeatureNetwork")
    return Desk(root, nets, matcher)


# ---------------------------------------------------------------------------
# smoke


@dataclasses.dataclass
class SmokeResult:
    untrained: float
    trained: float
    seconds: float

    @property
    def ratio(self) -> float:
        return self.trained / self.untrained


def smoke(desk: Desk, epochs: int = 30, seed: int = 0) -> SmokeResult:
    """Train the full objective and compare held-out pixel loss with the untrained generator."""
    manifest = corpus(desk.root, SMOKE_CORPUS, "smoke_data")
    test = load_split(manifest, "test")
    cfg = TrainConfig.desk(epochs=epochs, seed=seed)
    untrained = held_out_pixel_loss(new_state(cfg).G, test)
    start = time.perf_counter()
    state = train(cfg, manifest, desk.nets, desk.root / "smoke_run")
    seconds = time.perf_counter() - start
    return SmokeResult(untrained, held_out_pixel_loss(state.G, test), seconds)


# ---------------------------------------------------------------------------
# ablation and convergence


@dataclasses.dataclass
class AblationOutcome:
    result: AblationResult
    baseline: str
    full: str
    without_s: str
    reach: dict  # seed -> (epoch the with-S run first reaches the without-S final L_R, without-S epoch count)

    def median_auc(self, name: str) -> float:
        return next(r.auc for r in self.result.summary if r.config == name)

    @property
    def auc_holds(self) -> bool:
        return self.median_auc(self.full) >= self.median_auc(self.baseline)

    @property
    def convergence_holds(self) -> bool:
        inf = float("inf")
        with_s = np.median([inf if a is None else a for a, _ in self.reach.values()])
        without = np.median([b for _, b in self.reach.values()])
        return bool(with_s <= without)


def ablation(desk: Desk, epochs: int = 30, seeds: Sequence[int] = (0, 1, 2),
             configs: Sequence[AblationConfig] = ABLATION_CONFIGS, baseline: str = "GAN+R",
             full: str = "SG-GAN", without_s: str = "GAN+R+P+I") -> AblationOutcome:
    """Train each config per seed, report AUC/EER, and compare L_R convergence with and without S."""
    manifest = corpus(desk.root, ABLATION_CORPUS, "ablation_data")
    out = desk.root / "ablation"
    result = run_ablation(configs, load_split(manifest, "train"), load_split(manifest, "test"),
                          desk.nets, desk.matcher, TrainConfig.desk(epochs=epochs), seeds=seeds, out_dir=out)
    reach = {}
    for seed in seeds:
        with_log, without_log = result.loss_logs[(full, seed)], result.loss_logs[(without_s, seed)]
        target = without_log[-1]["pixel"]
        reach[seed] = (epochs_to_reach(with_log, target), len(without_log))
        emit_convergence_plot({"with S": with_log, "without S": without_log}, out, stem=f"convergence_seed{seed}")
    with open(out / "convergence.tsv", "w") as fh:
        fh.write("seed\twith_S_epochs_to_reach\twithout_S_epochs\n")
        for seed, (a, b) in reach.items():
            fh.write(f"{seed}\t{'never' if a is None else a}\t{b}\n")
    return AblationOutcome(result, baseline, full, without_s, reach)


# ---------------------------------------------------------------------------
# transfer across thermal styles


@dataclasses.dataclass
class TransferOutcome:
    rows: list  # (method, seed, held-out pixel loss)

    def median(self, method: str) -> float:
        return float(np.median([p for m, _, p in self.rows if m == method]))

    def table(self) -> str:
        methods = list(dict.fromkeys(m for m, _, _ in self.rows))
        lines = ["method\tseed\tpixel_loss"] + [f"{m}\t{s}\t{p:.4f}" for m, s, p in self.rows]
        lines += [f"{m}\tmedian\t{self.median(m):.4f}" for m in methods]
        return "\n".join(lines) + "\n"

    def holds(self, strategy: str) -> bool:
        return self.median(f"fine-tune {strategy}") <= self.median("scratch")


def transfer(desk: Desk, epochs: int = 30, seeds: Sequence[int] = (0, 1, 2), fraction: float = 0.25,
             strategies: Sequence[str] = STRATEGIES) -> TransferOutcome:
    """Base model on style A, then style B with a reduced train split: fine-tune vs. scratch."""
    base_data = corpus(desk.root, TRANSFER_BASE, "transfer_base")
    target = corpus(desk.root, TRANSFER_TARGET, "transfer_target")
    train_b = load_split(target, "train")
    small = train_b[::round(1 / fraction)]
    test_b = load_split(target, "test")
    logger.info("transfer: %d base pairs, %d of %d style-B train pairs, %d test pairs",
                len(base_data.select("train")), len(small), len(train_b), len(test_b))
    out = desk.root / "transfer"
    rows = []
    for seed in seeds:
        cfg = TrainConfig.desk(epochs=epochs, seed=seed)
        train(cfg, base_data, desk.nets, out / f"base_seed{seed}")
        base = out / f"base_seed{seed}" / "final.sggan"
        state = train(cfg, small, desk.nets, out / f"scratch_seed{seed}")
        rows.append(("scratch", seed, held_out_pixel_loss(state.G, test_b)))
        for strategy in strategies:
            state = fine_tune(base, small, strategy, cfg, desk.nets, out / f"{strategy}_seed{seed}")
            rows.append((f"fine-tune {strategy}", seed, held_out_pixel_loss(state.G, test_b)))
    outcome = TransferOutcome(rows)
    (out / "transfer.tsv").write_text(outcome.table())
    return outcome


def run_all(root, epochs: int = 30, seeds: Sequence[int] = (0, 1, 2), log=print) -> dict:
    desk = prepare(root)
    s = smoke(desk, epochs)
    log(f"smoke: untrained {s.untrained:.4f} -> trained {s.trained:.4f} (ratio {s.ratio:.3f}, {s.seconds:.0f}s)")
    a = ablation(desk, epochs, seeds)
    for row in a.result.summary:
        log(f"ablation: {row.config:<16} median AUC {row.auc:6.2f}  EER {row.eer:6.2f}")
    log(f"convergence (with-S epochs to reach without-S final L_R, without-S epochs): {a.reach}")
    t = transfer(desk, epochs, seeds)
    log(t.table())
    return {"smoke": s, "ablation": a, "transfer": t}

