"""Cross-spectral verification: embeddings, cosine scores, ROC/AUC/EER, ablations."""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from sggan.data import Image, PairedSample, stack_images
from sggan.errors import ConfigError, NumericError, ShapeError
from sggan.losses import LossWeights
from sggan.networks import FeatureNetwork, UNetGenerator
from sggan.trainer import parse_flat_config, train

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# embeddings and scores


@torch.no_grad()
def embed(matcher: FeatureNetwork, img) -> np.ndarray:
    """Embedding vector(s) from the matcher's penultimate layer.

    An Image or 3 x H x W tensor gives one vector; an N x 3 x H x W tensor gives N x dim.
    """
    x = img.to_tensor()[None] if isinstance(img, Image) else img
    single = x.dim() == 3
    if single:
        x = x[None]
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"matcher expects 3-channel images, got {tuple(x.shape)}")
    matcher.eval()
    v = matcher.embed(x).double().numpy()
    return v[0] if single or isinstance(img, Image) else v


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"vector dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclasses.dataclass(frozen=True)
class Score:
    similarity: float
    genuine: bool
    probe_id: str
    gallery_id: str


@dataclasses.dataclass
class ScoreSet:
    scores: list[Score]

    def __post_init__(self):
        if not all(np.isfinite(s.similarity) for s in self.scores):
            raise NumericError("non-finite similarity score")

    @classmethod
    def from_arrays(cls, genuine_scores, impostor_scores) -> "ScoreSet":
        scores = [Score(float(s), True, f"g{i}", f"g{i}") for i, s in enumerate(genuine_scores)]
        scores += [Score(float(s), False, f"i{i}", f"i{i}") for i, s in enumerate(impostor_scores)]
        return cls(scores)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        sim = np.array([s.similarity for s in self.scores], dtype=np.float64)
        gen = np.array([s.genuine for s in self.scores], dtype=bool)
        return sim, gen

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["probe_id", "gallery_id", "genuine", "score"])
            for s in self.scores:
                w.writerow([s.probe_id, s.gallery_id, int(s.genuine), repr(s.similarity)])


def verification_scores(probes: Sequence[tuple[str, str, np.ndarray]],
                        gallery: Sequence[tuple[str, str, np.ndarray]]) -> ScoreSet:
    """Score every probe against every gallery entry.

    Entries are (item_id, subject_id, embedding); a pair is genuine iff subject ids match.
    """
    if not probes or not gallery:
        raise ConfigError("verification needs non-empty probe and gallery sets")
    out = []
    for pid, psub, pvec in probes:
        for gid, gsub, gvec in gallery:
            out.append(Score(cosine(pvec, gvec), psub == gsub, pid, gid))
    return ScoreSet(out)


# ---------------------------------------------------------------------------
# ROC / AUC / EER


@dataclasses.dataclass
class RocCurve:
    thresholds: np.ndarray  # strictly decreasing, +inf first
    tpr: np.ndarray
    fpr: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "tpr", "fpr"])
            for t, a, b in zip(self.thresholds, self.tpr, self.fpr):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])


def roc_curve(s: ScoreSet) -> RocCurve:
    sim, gen = s.arrays()
    n_pos, n_neg = int(gen.sum()), int((~gen).sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("ROC needs at least one genuine and one impostor score")
    order = np.argsort(-sim, kind="mergesort")
    sim, gen = sim[order], gen[order]
    tp = np.cumsum(gen)
    fp = np.cumsum(~gen)
    # last index of each run of tied scores: accept everything >= that threshold
    last = np.r_[np.nonzero(np.diff(sim))[0], len(sim) - 1]
    thresholds = np.r_[np.inf, sim[last]]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    return RocCurve(thresholds, tpr, fpr)


def auc_from_roc(roc: RocCurve) -> float:
    """Trapezoidal area under TPR(FPR)."""
    return float(np.sum(np.diff(roc.fpr) * (roc.tpr[1:] + roc.tpr[:-1]) / 2.0))


def eer_from_roc(roc: RocCurve) -> float:
    """Rate where FPR equals 1 - TPR, linearly interpolated between bracketing thresholds."""
    d = roc.fpr - (1.0 - roc.tpr)  # rises from -1 to +1 along the curve
    k = int(np.argmax(d >= 0))
    if d[k] == 0 or k == 0:
        return float(roc.fpr[k])
    t = d[k - 1] / (d[k - 1] - d[k])
    return float(roc.fpr[k - 1] + t * (roc.fpr[k] - roc.fpr[k - 1]))


def roc_auc_eer(s: ScoreSet) -> tuple[RocCurve, float, float]:
    """ROC plus AUC and EER, both in percent."""
    roc = roc_curve(s)
    return roc, 100.0 * auc_from_roc(roc), 100.0 * eer_from_roc(roc)


def format_rate(value: float) -> str:
    return f"{value:.2f}"


# ---------------------------------------------------------------------------
# synthesis-based verification


@torch.no_grad()
def synthesize(G: UNetGenerator, thermal: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    """Eval-mode generator over a stack of thermal images."""
    G.eval()
    return torch.cat([G(thermal[i : i + batch_size]) for i in range(0, len(thermal), batch_size)])


def held_out_pixel_loss(G: UNetGenerator, samples: Sequence[PairedSample]) -> float:
    x = stack_images([s.thermal for s in samples])
    y = stack_images([s.visible for s in samples])
    return float((synthesize(G, x) - y).abs().mean())


def _gallery(samples: Sequence[PairedSample], vectors: np.ndarray, pairing: str):
    if pairing not in ("full", "first"):
        raise ConfigError(f"pairing must be 'full' or 'first', got {pairing!r}")
    out, seen = [], set()
    for i, (s, v) in enumerate(zip(samples, vectors)):
        if pairing == "first" and s.subject_id in seen:
            continue
        seen.add(s.subject_id)
        out.append((f"vis{i:04d}", s.subject_id, v))
    return out


def evaluate_generator(G: Optional[UNetGenerator], matcher: FeatureNetwork, test: Sequence[PairedSample],
                       pairing: str = "full") -> tuple[ScoreSet, RocCurve, float, float]:
    """Match G(thermal) probes against real visible gallery images of the test split.

    With ``G=None`` the raw thermal images are embedded instead (direct matching).
    """
    if not test:
        raise ConfigError("test split is empty")
    thermal = stack_images([s.thermal for s in test])
    visible = stack_images([s.visible for s in test])
    probes_img = thermal if G is None else synthesize(G, thermal)
    pv = embed(matcher, probes_img)
    gv = embed(matcher, visible)
    probes = [(f"thm{i:04d}", s.subject_id, v) for i, (s, v) in enumerate(zip(test, pv))]
    scores = verification_scores(probes, _gallery(test, gv, pairing))
    roc, auc, eer = roc_auc_eer(scores)
    return scores, roc, auc, eer


# ---------------------------------------------------------------------------
# ablation


@dataclasses.dataclass(frozen=True)
class AblationConfig:
    name: str
    terms: frozenset
    weights: LossWeights = LossWeights()

    def __post_init__(self):
        object.__setattr__(self, "terms", frozenset(self.terms))
        if not {"GAN", "R"} <= self.terms:
            raise ConfigError(f"{self.name}: GAN and R are always enabled")
        unknown = self.terms - {"GAN", "R", "P", "I", "S"}
        if unknown:
            raise ConfigError(f"{self.name}: unknown loss terms {sorted(unknown)}")

    @property
    def effective_weights(self) -> LossWeights:
        return self.weights.restricted(set(self.terms))

    @classmethod
    def from_text(cls, text: str, default_name: str = "config") -> "AblationConfig":
        """Flat ``key = value`` text with ``name``, ``terms`` (e.g. GAN,R,P) and optional lambda_* keys."""
        values = parse_flat_config(text)
        name = values.pop("name", default_name)
        if "terms" not in values:
            raise ConfigError(f"{name}: missing 'terms'")
        terms = {t.strip().upper() for t in values.pop("terms").split(",") if t.strip()}
        fields = {f.name for f in dataclasses.fields(LossWeights)}
        updates = {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key: {key}")
            try:
                updates[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(name, terms, dataclasses.replace(LossWeights(), **updates))

    @classmethod
    def from_file(cls, path) -> "AblationConfig":
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), default_name=path.stem)


TABLE_I = (
    AblationConfig("GAN+R", {"GAN", "R"}),
    AblationConfig("GAN+R+P", {"GAN", "R", "P"}),
    AblationConfig("GAN+R+P+I", {"GAN", "R", "P", "I"}),
    AblationConfig("SG-GAN", {"GAN", "R", "P", "I", "S"}),
)


@dataclasses.dataclass
class AblationRow:
    config: str
    seed: Optional[int]
    auc: float
    eer: float


@dataclasses.dataclass
class AblationResult:
    per_seed: list[AblationRow]
    summary: list[AblationRow]  # medians per config, then direct matching
    loss_logs: dict  # (config, seed) -> history
    rocs: dict  # (config, seed) -> RocCurve
    pixel_losses: dict  # (config, seed) -> held-out pixel loss

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "ablation.tsv", self.per_seed)
        write_table(out / "ablation_summary.tsv", self.summary)
        for (name, seed), roc in self.rocs.items():
            suffix = "" if seed is None else f"_seed{seed}"
            roc.write_csv(out / f"roc_{_slug(name)}{suffix}.csv")


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_").lower()


def write_table(path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("config\tseed\tAUC%\tEER%\n")
        for r in rows:
            seed = "median" if r.seed is None else str(r.seed)
            fh.write(f"{r.config}\t{seed}\t{format_rate(r.auc)}\t{format_rate(r.eer)}\n")


def run_ablation(configs: Sequence[AblationConfig], train_samples: Sequence[PairedSample],
                 test_samples: Sequence[PairedSample], nets, matcher: FeatureNetwork, budget,
                 seeds: Sequence[int] = (0, 1, 2), pairing: str = "full", out_dir=None) -> AblationResult:
    """Train every config for every seed under one budget and compare verification rates.

    ``budget`` is the TrainConfig shared by all runs; each run overrides its seed and
    loss weights. A "Direct Matching" row embeds thermal probes without synthesis.
    """
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate ablation config names: {names}")
    per_seed, logs, rocs, pix = [], {}, {}, {}
    train_samples = list(train_samples)
    for cfg in configs:
        for seed in seeds:
            run_cfg = dataclasses.replace(budget.with_weights(cfg.effective_weights), seed=seed)
            run_dir = None if out_dir is None else Path(out_dir) / f"{_slug(cfg.name)}_seed{seed}"
            state = train(run_cfg, train_samples, nets, run_dir)
            _, roc, auc, eer = evaluate_generator(state.G, matcher, test_samples, pairing)
            per_seed.append(AblationRow(cfg.name, seed, auc, eer))
            logs[(cfg.name, seed)] = state.history
            rocs[(cfg.name, seed)] = roc
            pix[(cfg.name, seed)] = held_out_pixel_loss(state.G, test_samples)
            logger.info("%s seed %d: AUC %.2f EER %.2f", cfg.name, seed, auc, eer)
    _, roc, auc, eer = evaluate_generator(None, matcher, test_samples, pairing)
    rocs[("Direct Matching", None)] = roc
    summary = [AblationRow("Direct Matching", None, auc, eer)]
    for cfg in configs:
        rows = [r for r in per_seed if r.config == cfg.name]
        summary.append(AblationRow(cfg.name, None, float(np.median([r.auc for r in rows])),
                                   float(np.median([r.eer for r in rows]))))
    per_seed.append(AblationRow("Direct Matching", None, auc, eer))
    result = AblationResult(per_seed, summary, logs, rocs, pix)
    if out_dir is not None:
        result.write(out_dir)
    return result


# ---------------------------------------------------------------------------
# convergence


def emit_convergence_plot(logs: dict, out_dir, terms: Sequence[str] = ("pixel", "identity"),
                          stem: str = "convergence") -> tuple[Path, Path]:
    """Per-epoch curves of selected loss terms for several labelled runs, as CSV and PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not logs:
        raise ValueError("no loss logs given")
    epochs = {label: [r["epoch"] for r in log] for label, log in logs.items()}
    ref = next(iter(epochs.values()))
    for label, ep in epochs.items():
        if ep != ref:
            raise ValueError(f"loss log {label!r} covers epochs {ep[0]}..{ep[-1]}, expected {ref[0]}..{ref[-1]}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, png_path = out / f"{stem}.csv", out / f"{stem}.png"
    labels = list(logs)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"{label}:{t}" for t in terms for label in labels])
        for i, epoch in enumerate(ref):
            w.writerow([epoch] + [repr(float(logs[label][i][t])) for t in terms for label in labels])

    fig, axes = plt.subplots(len(terms), 1, figsize=(5, 2.6 * len(terms)), squeeze=False)
    for ax, t in zip(axes[:, 0], terms):
        for label in labels:
            ax.plot(ref, [r[t] for r in logs[label]], label=label)
        ax.set_ylabel(t)
        ax.legend(fontsize=7)
    axes[-1, 0].set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(png_path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return csv_path, png_path


def epochs_to_reach(log: Sequence[dict], target: float, term: str = "pixel") -> Optional[int]:
    """First epoch whose logged ``term`` is <= target, or None."""
    for rec in log:
        if rec[term] <= target:
            return rec["epoch"]
    return None
