"""Command-line entry point: ``shapeletrf [--config F] [--seed N] [--out DIR] <command> ...``.

Results go to stdout and to files under ``--out``; diagnostics go to stderr.
Any error exits with status 1 and a single-line message.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .experiment import ExperimentConfig, desk_model_config, load_config
from .explain import explain, export_explanation, faithfulness_eval
from .gradcheck import run_gradcheck
from .inference import FewShotProtocol, evaluate
from .model import GROUP_ORDER, ModelConfig, census, census_ratio
from .signal import load_dataset, save_dataset, split_dataset
from .synth import synth_dataset
from .trainer import load_checkpoint, save_checkpoint, train, write_json

log = logging.getLogger("shapeletrf")

PRESETS = {
    # BERT-base dimensions with the default embedder, shapelets and 16 classes
    "bert-base": lambda: ModelConfig(class_count=16, backbone=BackboneConfig(
        layer_count=12, d_h=768, head_count=12, ff_width=3072, max_seq=512),
        embedder=replace(ModelConfig().embedder, out_channels=768)),
    "desk": lambda: desk_model_config(8),
    "desk64": lambda: ModelConfig(backbone=BackboneConfig(layer_count=2, d_h=64)),
}


def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="JSON experiment config (see docs/config.md)")
    p.add_argument("--seed", type=int, default=default, help="overrides the seed of the command's random streams")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else "runs", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapeletrf", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    add("synth", "synthesize a multi-device, multi-domain dataset")

    p = add("train", "train a model on the source domains")
    p.add_argument("--data", help="dataset manifest; synthesized from the config when omitted")
    p.add_argument("--domains", help="comma-separated domain names to train on (default: source domains)")

    for name, help_ in (("eval", "standard per-domain accuracy"), ("fewshot", "prototype few-shot accuracy"),
                        ("explain", "top shapelet matches for one frame"),
                        ("faithfulness", "shapelet-guided vs random masking")):
        p = add(name, help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="dataset manifest")
        p.add_argument("--domains", help="comma-separated domain names (default: all)")
        if name == "fewshot":
            p.add_argument("--n-shot", type=int, default=5)
            p.add_argument("--n-query", type=int, default=30)
            p.add_argument("--repeats", type=int, default=30)
        elif name == "explain":
            p.add_argument("--frame-id", type=int, default=0)
            p.add_argument("--top-k", type=int, default=5)
            p.add_argument("--format", choices=("csv", "svg"), default="csv")
        elif name == "faithfulness":
            p.add_argument("--lengths", default="8,16,32")
            p.add_argument("--mode", choices=("zeros", "noise"), default="zeros")

    p = add("gradcheck", "finite-difference check of every op and the full loss")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--max-coords", type=int, default=8)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk64")

    p = add("inspect", "parameter census and trainable ratio")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--trainable", help="comma-separated trainable groups (overrides the config)")
    return parser


def _experiment(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _select(dataset, domains: str | None):
    if not domains:
        return dataset
    names = [d.strip() for d in domains.split(",")]
    missing = [n for n in names if n not in dataset.domains]
    if missing:
        raise ValueError(f"unknown domain(s) {missing}; dataset has {dataset.domains}")
    return dataset.select_domains([dataset.domains.index(n) for n in names])


def _print_table(rows: dict, cols: list[str]):
    print("domain".ljust(14) + "".join(c.rjust(12) for c in cols))
    for name, r in rows.items():
        cells = "".join((f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c])).rjust(12) for c in cols)
        print(name.ljust(14) + cells)


def cmd_synth(args):
    cfg = _experiment(args).synth
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    fleet, channels = cfg.build()
    data, _ = synth_dataset(fleet, channels, cfg.frames_per_cell, cfg.seed)
    out = _out(args)
    manifest = save_dataset(data, out / "dataset.json")
    write_json(out / "fleet.json", {"devices": [p.to_dict() for p in fleet],
                                    "channels": [c.to_dict() for c in channels], "synth": asdict(cfg)})
    print(f"wrote {manifest.total_frames} frames ({len(fleet)} devices x {len(channels)} domains) "
          f"to {out / 'dataset.json'}")


def cmd_train(args):
    cfg = _experiment(args)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed, model=replace(cfg.train.model, seed=args.seed))
    if args.data:
        data = load_dataset(args.data)
        source = _select(data, args.domains) if args.domains else data
    else:
        fleet, channels = cfg.synth.build()
        data, _ = synth_dataset(fleet, channels, cfg.synth.frames_per_cell, cfg.synth.seed)
        source = _select(data, args.domains) if args.domains else \
            data.select_domains(range(cfg.synth.source_domains))
    cfg.train.model.class_count = data.class_count
    tr, va, te = split_dataset(source, cfg.split, cfg.split_seed)
    out = _out(args)
    result = train(cfg.train, tr, va, log_path=out / "train_log.jsonl")
    save_checkpoint(result.final, out / "final.ckpt")
    save_checkpoint(result.best, out / "best.ckpt")
    write_json(out / "config.json", cfg.to_dict())
    last = result.history[-1]
    print(f"trained {last['epoch']} epochs ({last['step']} steps); final val accuracy {last['val_acc']:.4f}; "
          f"best {result.best.metadata.get('best_val_acc', float('nan')):.4f}; checkpoints in {out}")


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint).model
    data = _select(load_dataset(args.data), args.domains)
    res = evaluate(model, data, "standard")
    _print_table(res, ["accuracy", "frames"])
    write_json(_out(args) / "eval.json", res)


def cmd_fewshot(args):
    model = load_checkpoint(args.checkpoint).model
    data = _select(load_dataset(args.data), args.domains)
    seed = args.seed if args.seed is not None else _experiment(args).fewshot_seed
    res = evaluate(model, data, "fewshot", FewShotProtocol(args.n_shot, args.n_query, args.repeats, seed))
    _print_table(res, ["accuracy", "std", "n_shot", "repeats"])
    write_json(_out(args) / f"fewshot_{args.n_shot}shot.json", res)


def cmd_explain(args):
    model = load_checkpoint(args.checkpoint).model
    data = _select(load_dataset(args.data), args.domains)
    if not 0 <= args.frame_id < len(data):
        raise ValueError(f"frame id {args.frame_id} outside [0, {len(data)})")
    frame = data.frames[args.frame_id].astype(np.float64)
    entries = explain(model, frame, args.top_k)
    path = export_explanation(entries, frame, _out(args) / f"explain_{args.frame_id}.{args.format}",
                              args.format, frame_id=args.frame_id)
    print(f"frame {args.frame_id} (device {data.device_labels[args.frame_id]})")
    for e in entries:
        print(f"  S{e.shapelet_id:<3d} L={e.length:<3d} t={e.t_star:<4d} a={e.activation:.4f} d_min={e.d_min:.4f}")
    print(f"wrote {path}")


def cmd_faithfulness(args):
    model = load_checkpoint(args.checkpoint).model
    data = _select(load_dataset(args.data), args.domains)
    seed = args.seed if args.seed is not None else _experiment(args).faithfulness_seed
    lengths = [int(x) for x in args.lengths.split(",")]
    rep = faithfulness_eval(model, data, lengths, seed, args.mode)
    print(f"baseline accuracy {rep['baseline_accuracy']:.4f} over {rep['frames']} frames")
    print("L".rjust(4) + "shapelet_drop".rjust(16) + "random_drop".rjust(14))
    for L, r in rep["lengths"].items():
        print(f"{L:4d}{r['shapelet_drop']:16.4f}{r['random_drop']:14.4f}")
    write_json(_out(args) / "faithfulness.json", rep)


def cmd_gradcheck(args):
    config = _experiment(args).train.model if args.config else PRESETS[args.preset]()
    rep = run_gradcheck(config, args.seed or 0, args.repeats, args.max_coords)
    for name, err in rep.errors.items():
        print(f"{name:<30s} {err:.3e}")
    print(f"max relative error {rep.max_error:.3e} ({rep.seconds:.1f} s)")
    write_json(_out(args) / "gradcheck.json", {"errors": rep.errors, "max": rep.max_error, "seconds": rep.seconds})
    if rep.max_error > 1e-4:
        raise RuntimeError(f"gradient check failed: max relative error {rep.max_error:.3e} > 1e-4")


def cmd_inspect(args):
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).model
        if args.trainable:
            model.set_trainable(tuple(args.trainable.split(",")))
        rows = [(g, n, tuple(p.shape), bool(p.requires_grad)) for g, n, p in model.named_groups()]
        for g, n, shape, flag in rows:
            print(f"{n:<32s} {g:<22s} {str(shape):<18s} {'trainable' if flag else 'frozen'}")
        config = model.config
    else:
        config = PRESETS[args.preset]() if args.preset else _experiment(args).train.model
        if args.trainable is not None:
            config.trainable = tuple(t for t in args.trainable.split(",") if t)
        config.validate()
    counts = census(config)
    trainable, total, ratio = census_ratio(config)
    print(f"{'group':<22s}{'parameters':>14s}  status")
    for g in GROUP_ORDER:
        print(f"{g:<22s}{counts[g]:>14,d}  {'trainable' if g in config.trainable else 'frozen'}")
    print(f"trainable {trainable:,d} of {total:,d} ({100 * ratio:.3f}%)")
    write_json(_out(args) / "inspect.json", {"groups": counts, "trainable": trainable, "total": total,
                                             "trainable_ratio": ratio, "trainable_groups": list(config.trainable)})


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "fewshot": cmd_fewshot,
            "explain": cmd_explain, "faithfulness": cmd_faithfulness, "gradcheck": cmd_gradcheck,
            "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except Exception as e:  # every failure becomes one diagnostic line
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"shapeletrf {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
