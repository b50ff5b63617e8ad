"""Command-line entry point: ``sggan {gen-data,train,synth,eval,ablate,replay}``.

Every command writes ``run.json`` (a RunDescriptor) into its output directory.
``sggan replay run.json --out DIR`` re-executes the recorded run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from sggan import __version__
from sggan.data import THERMAL, DatasetManifest, load_split, read_image, stack_images, write_image
from sggan.errors import ConfigError, IngestError, LoadError, NumericError, ShapeError, TrainingError
from sggan.evaluation import (
    TABLE_I,
    AblationConfig,
    emit_convergence_plot,
    evaluate_generator,
    format_rate,
    held_out_pixel_loss,
    run_ablation,
    synthesize,
)
from sggan.losses import LossWeights
from sggan.networks import load_network, save_network
from sggan.stubs import StubNetworks, train_matcher, train_stub_networks
from sggan.synthetic import SyntheticConfig, generate_synthetic_dataset
from sggan.trainer import STRATEGIES, TrainConfig, fine_tune, load_model, parse_flat_config, resume, train

logger = logging.getLogger("sggan")

DESCRIPTOR = "run.json"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


@dataclasses.dataclass
class RunDescriptor:
    command: str
    config: dict
    seed: int
    inputs: dict
    outputs: list
    argv: list
    version: str = __version__

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / DESCRIPTOR
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "RunDescriptor":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


class _Usage(Exception):
    """Raised for flag combinations argparse cannot express; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config resolution


def _synthetic_config(args) -> SyntheticConfig:
    values = {}
    if args.config:
        values = parse_flat_config(Path(args.config).read_text(encoding="utf-8"))
        fields = {f.name: f for f in dataclasses.fields(SyntheticConfig)}
        for key in values:
            if key not in fields:
                raise ConfigError(f"unknown config key: {key}")
        cfg = SyntheticConfig()
        try:
            values = {k: type(getattr(cfg, k))(v) for k, v in values.items()}
        except ValueError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
    flags = dict(n_subjects=args.subjects, pairs_per_subject=args.pairs, image_size=args.size,
                 style=args.style, test_fraction=args.test_fraction, seed=args.seed)
    values.update({k: v for k, v in flags.items() if v is not None})
    return SyntheticConfig(**values)


def _image_size(manifest: DatasetManifest) -> int:
    first = manifest.entries[0]
    return read_image(manifest.root / first.visible_path).height


def _train_config(args, manifest: Optional[DatasetManifest]) -> TrainConfig:
    """Preset, then --config file, then explicit flags."""
    preset = args.preset
    size = _image_size(manifest) if manifest is not None and manifest.entries else 256
    if preset == "auto":
        preset = "desk" if size < 256 else "full"
    cfg = TrainConfig.desk(image_size=size) if preset == "desk" else TrainConfig()
    file_keys = set()
    if args.config:
        file_keys = set(parse_flat_config(Path(args.config).read_text(encoding="utf-8")))
        cfg = TrainConfig.from_file(args.config, base=cfg)
    updates = {}
    if args.epochs is not None:
        updates["epochs"] = args.epochs
        if args.decay_start is None and preset == "desk" and "decay_start" not in file_keys:
            updates["decay_start"] = args.epochs // 2
        updates["checkpoint_every"] = min(cfg.checkpoint_every, args.epochs)
    if args.decay_start is not None:
        updates["decay_start"] = args.decay_start
    if args.seed is not None:
        updates["seed"] = args.seed
    if updates:
        cfg = TrainConfig.from_mapping(updates, base=cfg)
    if getattr(args, "weights", None) == "arl":
        cfg = cfg.with_weights(LossWeights.arl())
    loss_set = getattr(args, "loss_set", None)
    if loss_set:
        terms = {t.strip().upper() for t in loss_set.split(",") if t.strip()}
        cfg = cfg.with_weights(cfg.weights.restricted(terms))
    return cfg


def _manifest(path) -> DatasetManifest:
    if path is None:
        raise _Usage("--data is required")
    return DatasetManifest.read(path)


def _stub_nets(args, manifest: DatasetManifest, out: Path, seed: int) -> tuple[StubNetworks, str]:
    if args.nets and Path(args.nets, "identity.sggan").exists():
        return StubNetworks.load(args.nets), str(Path(args.nets).resolve())
    target = Path(args.nets) if args.nets else out / "nets"
    logger.info("no stub networks at %s; training them on the train split", target)
    train_stub_networks(manifest, seed=seed, out_dir=target)
    # reload so the in-memory copy matches what later runs will read from disk
    return StubNetworks.load(target), str(target.resolve())


def _matcher(args, manifest: DatasetManifest, out: Path, seed: int):
    if args.matcher and Path(args.matcher).exists():
        net, _ = load_network(args.matcher, "FeatureNetwork")
        return net, str(Path(args.matcher).resolve())
    target = Path(args.matcher) if args.matcher else out / "matcher.sggan"
    logger.info("no matcher at %s; training one on the train split", target)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_network(target, train_matcher(manifest, seed=seed), role="matcher")
    net, _ = load_network(target, "FeatureNetwork")
    return net, str(target.resolve())


def _listing(out: Path) -> list[str]:
    return sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != DESCRIPTOR)


def _finish(args, out: Path, config: dict, seed: int, inputs: dict, required: Sequence[str]) -> int:
    missing = [name for name in required if not (out / name).exists()]
    if missing:
        logger.error("missing artifacts: %s", ", ".join(missing))
        return EXIT_RUNTIME
    RunDescriptor(args.command, config, seed, inputs, _listing(out), list(args.argv)).write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _synthetic_config(args)
    out = Path(args.out)
    manifest = generate_synthetic_dataset(cfg, out)
    print(f"wrote {len(manifest)} pairs of {len(manifest.subjects())} subjects to {out}")
    return _finish(args, out, dataclasses.asdict(cfg), cfg.seed, {}, ["manifest.tsv"])


def cmd_train(args) -> int:
    manifest = _manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state_file = out / "state.sggan"
    if args.resume:
        if not state_file.exists():
            raise _Usage(f"--resume given but {state_file} does not exist")
        state = resume(state_file)
        cfg = state.cfg
    else:
        if args.base is None and args.strategy is not None:
            raise _Usage("--strategy needs --base")
        cfg = _train_config(args, manifest)
        state = None
    nets, nets_path = _stub_nets(args, manifest, out, cfg.seed)
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    inputs = {"data": str(Path(args.data).resolve()), "nets": nets_path}
    if args.base is not None and not args.resume:
        strategy = {s.lower(): s for s in STRATEGIES}.get((args.strategy or "G_and_D").lower())
        if strategy is None:
            raise _Usage(f"--strategy must be one of {', '.join(STRATEGIES)}")
        inputs["base"] = str(Path(args.base).resolve())
        state = fine_tune(args.base, manifest, strategy, cfg, nets, out_dir=out)
    else:
        state = train(cfg, manifest, nets, out_dir=out, state=state, stop_after=args.stop_after)
    if state.provenance:
        (out / "provenance.json").write_text(json.dumps(state.provenance, indent=2, sort_keys=True) + "\n")
    print(f"epoch {state.epoch}/{cfg.epochs}; final pixel loss {state.history[-1]['pixel']:.4f}")
    required = ["loss_log.jsonl", "state.sggan"]
    if state.epoch >= cfg.epochs:
        required.append("final.sggan")
    config = dataclasses.asdict(cfg)
    if state.provenance:
        config["init"] = state.provenance
    return _finish(args, out, config, cfg.seed, inputs, required)


def _triptych(*panels: np.ndarray) -> np.ndarray:
    return np.concatenate(panels, axis=1)


def cmd_synth(args) -> int:
    G, _, meta = load_model(args.model)
    out = Path(args.out)
    (out / "synth").mkdir(parents=True, exist_ok=True)
    inputs = {"model": str(Path(args.model).resolve())}
    if args.inputs:
        paths = sorted(p for p in Path(args.inputs).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not paths:
            raise ConfigError(f"no images in {args.inputs}")
        items = [(p.stem, read_image(p, THERMAL), None) for p in paths]
        inputs["inputs"] = str(Path(args.inputs).resolve())
    else:
        manifest = _manifest(args.data)
        samples = load_split(manifest, args.split)
        if not samples:
            raise ConfigError(f"{args.split} split is empty")
        names = [Path(e.thermal_path).stem for e in manifest.select(args.split).entries]
        items = [(n, s.thermal, s.visible) for n, s in zip(names, samples)]
        inputs["data"] = str(Path(args.data).resolve())
    fakes = synthesize(G, stack_images([img for _, img, _ in items]))
    required = []
    if any(t is not None for _, _, t in items):
        (out / "triptych").mkdir(exist_ok=True)
    for (name, thermal, target), fake in zip(items, fakes):
        fake_np = fake.permute(1, 2, 0).numpy()
        write_image(out / "synth" / f"{name}.png", fake_np)
        required.append(f"synth/{name}.png")
        if target is not None:
            panel = _triptych(thermal.pixels, fake_np, target.pixels)
            write_image(out / "triptych" / f"{name}.png", panel)
            required.append(f"triptych/{name}.png")
    print(f"synthesized {len(items)} images into {out / 'synth'}")
    return _finish(args, out, {"generator": meta["generator"]}, meta["config"]["seed"], inputs, required)


def cmd_eval(args) -> int:
    manifest = _manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = load_split(manifest, "test")
    if not test:
        raise ConfigError("test split is empty")
    if (args.model is None) == (not args.direct):
        raise _Usage("give exactly one of --model or --direct")
    seed = args.seed or 0
    matcher, matcher_path = _matcher(args, manifest, out, seed)
    inputs = {"data": str(Path(args.data).resolve()), "matcher": matcher_path}
    G = None
    summary = {}
    if args.model:
        G, _, _ = load_model(args.model)
        inputs["model"] = str(Path(args.model).resolve())
        summary["held_out_pixel_loss"] = f"{held_out_pixel_loss(G, test):.6f}"
    scores, roc, auc, eer = evaluate_generator(G, matcher, test, args.pairing)
    scores.write_csv(out / "scores.csv")
    roc.write_csv(out / "roc.csv")
    summary = {"AUC%": format_rate(auc), "EER%": format_rate(eer), **summary}
    (out / "summary.txt").write_text("".join(f"{k}\t{v}\n" for k, v in summary.items()), encoding="utf-8")
    print(f"AUC {format_rate(auc)}%  EER {format_rate(eer)}%")
    return _finish(args, out, {"pairing": args.pairing, "seed": seed}, seed, inputs,
                   ["scores.csv", "roc.csv", "summary.txt"])


def cmd_ablate(args) -> int:
    manifest = _manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_split, test = load_split(manifest, "train"), load_split(manifest, "test")
    if not test:
        raise ConfigError("test split is empty")
    if args.configs:
        configs = [AblationConfig.from_file(p) for p in args.configs.split(",") if p]
    else:
        configs = list(TABLE_I)
    budget = _train_config(args, manifest)
    seeds = [budget.seed + k for k in range(args.seeds)]
    nets, nets_path = _stub_nets(args, manifest, out, budget.seed)
    matcher, matcher_path = _matcher(args, manifest, out, budget.seed)
    result = run_ablation(configs, train_split, test, nets, matcher, budget, seeds=seeds,
                          pairing=args.pairing, out_dir=out / "runs")
    result.write(out)
    with open(out / "pixel_loss.tsv", "w", encoding="utf-8") as fh:
        fh.write("config\tseed\theld_out_pixel_loss\n")
        for (name, seed), value in result.pixel_losses.items():
            fh.write(f"{name}\t{seed}\t{value:.6f}\n")
    plots = []
    for seed in seeds:
        logs = {c.name: result.loss_logs[(c.name, seed)] for c in configs}
        csv_path, png_path = emit_convergence_plot(logs, out, stem=f"convergence_seed{seed}")
        plots += [csv_path.name, png_path.name]
    for row in result.summary:
        print(f"{row.config:<20} AUC {format_rate(row.auc)}  EER {format_rate(row.eer)}")
    config = {"budget": dataclasses.asdict(budget), "seeds": seeds, "pairing": args.pairing,
              "configs": [{"name": c.name, "terms": sorted(c.terms), "weights": dataclasses.asdict(c.weights)}
                          for c in configs]}
    inputs = {"data": str(Path(args.data).resolve()), "nets": nets_path, "matcher": matcher_path}
    return _finish(args, out, config, budget.seed, inputs, ["ablation.tsv", "ablation_summary.tsv"] + plots)


def cmd_replay(args) -> int:
    desc = RunDescriptor.read(args.descriptor)
    return main(replay_argv(desc, args.out))


def replay_argv(desc: RunDescriptor, out) -> list[str]:
    """The recorded argv with the output directory swapped for ``out``."""
    argv = list(desc.argv)
    for i, token in enumerate(argv):
        if token == "--out":
            argv[i + 1] = str(out)
        elif token.startswith("--out="):
            argv[i] = f"--out={out}"
    return argv


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed for the run")
    p.add_argument("--out", required=out_required, help="run directory (created if missing)")
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("-v", "--verbose", action="store_true")


def _budget_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("auto", "full", "desk"), default="auto",
                   help="base config: full = 256px defaults, desk = 64px/30-epoch; auto picks by image size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--decay-start", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sggan", description="Thermal-to-visible face synthesis toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic paired corpus")
    _common(p)
    p.add_argument("--subjects", type=int)
    p.add_argument("--pairs", type=int, help="pairs per subject")
    p.add_argument("--size", type=int, help="image side in pixels")
    p.add_argument("--style", choices=("A", "B"))
    p.add_argument("--test-fraction", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train (or fine-tune) a generator/discriminator pair")
    _common(p)
    _budget_flags(p)
    p.add_argument("--data", required=True, help="dataset directory holding manifest.tsv")
    p.add_argument("--nets", help="directory of stub networks (trained here if absent)")
    p.add_argument("--loss-set", help="comma list from gan,r,p,i,s; other terms get weight 0")
    p.add_argument("--weights", choices=("default", "arl"), default="default")
    p.add_argument("--base", help="checkpoint to fine-tune from")
    p.add_argument("--strategy", help="fine-tuning strategy: G_and_D (default) or G_only")
    p.add_argument("--resume", action="store_true", help="continue from OUT/state.sggan")
    p.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="apply a trained generator to thermal images")
    _common(p)
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset directory; writes thermal|synthesized|target triptychs")
    src.add_argument("--inputs", help="directory of thermal images")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="verification AUC/EER of a generator (or direct matching)")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--direct", action="store_true", help="embed thermal probes without synthesis")
    p.add_argument("--matcher", help="matcher checkpoint (trained here if absent)")
    p.add_argument("--pairing", choices=("full", "first"), default="full")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss-term ablation over several seeds")
    _common(p)
    _budget_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--nets")
    p.add_argument("--matcher")
    p.add_argument("--configs", help="comma list of ablation config files (default: the four standard rows)")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, counted up from --seed")
    p.add_argument("--pairing", choices=("full", "first"), default="full")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="re-run a recorded command into a new directory")
    p.add_argument("descriptor", help="run.json written by an earlier command")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"sggan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"sggan {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, IngestError, ShapeError, NumericError, TrainingError, OSError) as exc:
        print(f"sggan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
