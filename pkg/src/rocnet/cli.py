"""Command-line entry point: ``rocnet <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import octree as oct
from .latents import read_latents, write_latents
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit, fit_classifier, thread_limits
from .voxel import SHAPE_KINDS, generate_synthetic, load_grid, save_grid

logger = logging.getLogger("rocnet")

# config-file keys and their types; command-line flags override file values
CONFIG_KEYS = {
    "seed": int,
    "n": int,
    "k": int,
    "latent_dim": int,
    "alpha": float,
    "batch_size": int,
    "iterations": int,
    "lr": float,
    "mode": str,
    "out": str,
    "task": str,
    "checkpoint_every": int,
    "eval_every": int,
    "chamfer_points": int,
}

DEFAULTS = {
    "seed": 0,
    "n": 32,
    "k": 8,
    "latent_dim": 80,
    "alpha": 5.0,
    "batch_size": 50,
    "iterations": 300,
    "lr": 1e-3,
    "mode": "predicted",
    "out": ".",
    "task": "autoencode",
    "checkpoint_every": 0,
    "eval_every": 0,
    "chamfer_points": 2048,
}


class CliError(Exception):
    pass


def read_config_file(path) -> Dict[str, object]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in CONFIG_KEYS:
                raise CliError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = CONFIG_KEYS[key](value)
    return values


def resolve_config(args: argparse.Namespace) -> Dict[str, object]:
    resolved = dict(DEFAULTS)
    if getattr(args, "config", None):
        resolved.update(read_config_file(args.config))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def write_config_echo(config: Dict[str, object], out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.txt"), "w") as f:
        for key in sorted(config):
            f.write(f"{key} = {config[key]}\n")


def read_manifest(path) -> List[Dict[str, str]]:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        if not os.path.isabs(row["path"]):
            row["path"] = os.path.join(base, row["path"])
    return rows


def _load_grids(args) -> tuple:
    if getattr(args, "manifest", None):
        rows = read_manifest(args.manifest)
        return [load_grid(r["path"]) for r in rows], [r.get("label", "") for r in rows]
    grids = [load_grid(p) for p in args.grids]
    return grids, [""] * len(grids)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, cfg) -> int:
    kinds = args.kind.split(",")
    for kind in kinds:
        if kind not in SHAPE_KINDS:
            raise CliError(f"unknown shape kind {kind!r}; choose from {', '.join(SHAPE_KINDS)}")
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    seeds = rng.integers(0, 2 ** 31, size=args.count)
    with open(os.path.join(out, "manifest.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "label"])
        for i in range(args.count):
            kind = kinds[i % len(kinds)]
            grid = generate_synthetic(kind, cfg["n"], seed=int(seeds[i]))
            name = f"{kind}_{i:04d}.rvox"
            save_grid(grid, os.path.join(out, name))
            w.writerow([name, kind])
    print(f"wrote {args.count} grids to {out}")
    return 0


def cmd_octree(args, cfg) -> int:
    if args.action in ("build", "unbuild") and not args.output:
        raise CliError(f"octree {args.action} needs an output path")
    if args.action == "build":
        grid = load_grid(args.input)
        tree = oct.build(grid, cfg["k"])
        oct.serialize(tree, args.output)
        print(f"nodes: {tree.node_count()}, mixed: {len(tree.mixed_leaves())}")
    elif args.action == "unbuild":
        save_grid(oct.to_voxels(oct.deserialize(args.input)), args.output)
    else:
        with open(args.input, "rb") as f:
            magic = f.read(4)
        tree = oct.deserialize(args.input) if magic == oct.MAGIC else oct.build(load_grid(args.input), cfg["k"])
        print("\n".join(oct.stats(tree).lines()))
    return 0


def _model_config(cfg, n_classes=0) -> ModelConfig:
    return ModelConfig(grid_side=cfg["n"], leaf_side=cfg["k"], latent_dim=cfg["latent_dim"], n_classes=n_classes)


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(batch_size=cfg["batch_size"], iterations=cfg["iterations"], learning_rate=cfg["lr"],
                       alpha=cfg["alpha"], seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
                       eval_every=cfg["eval_every"])


def cmd_train(args, cfg) -> int:
    from .plotting import plot_loss_curve
    out = cfg["out"]
    grids, labels = _load_grids(args)
    if not grids:
        raise CliError("manifest lists no grids")
    if grids[0].side != cfg["n"]:
        logger.info("using grid side %d from data", grids[0].side)
        cfg["n"] = grids[0].side
    write_config_echo(cfg, out)
    if cfg["task"] == "classify":
        from .evaluation import eval_classification, split_indices
        classes = sorted(set(labels))
        y = np.array([classes.index(lbl) for lbl in labels])
        train_idx, test_idx = split_indices(len(grids), cfg["seed"])
        result = fit_classifier([grids[i] for i in train_idx], y[train_idx], _model_config(cfg, len(classes)),
                                _train_config(cfg))
        save_checkpoint(result.params, os.path.join(out, "final.rockpt"))
        acc = eval_classification(result.params, [grids[i] for i in test_idx], y[test_idx])
        with open(os.path.join(out, "classes.txt"), "w") as f:
            f.write("\n".join(classes) + "\n")
        print(f"held-out accuracy: {acc:.4f} ({len(test_idx)} samples)")
        return 0
    result = fit(grids, _model_config(cfg), _train_config(cfg), out_dir=out)
    plot_loss_curve(result.history, os.path.join(out, "loss_curve.png"))
    last = result.history[-1]
    print(f"trained {len(result.history)} iterations in {result.seconds:.1f}s; "
          f"final loss {last.total:.4f} (label {last.label_loss:.4f}, recon {last.recon_loss:.4f})")
    return 0


def cmd_encode(args, cfg) -> int:
    from .model import encode_grids
    ps = load_checkpoint(args.checkpoint)
    grids, _ = _load_grids(args)
    codes = encode_grids(grids, ps)
    write_latents(codes, args.output)
    print(f"wrote {len(codes)} latent codes of length {codes.shape[1]} to {args.output}")
    return 0


def cmd_decode(args, cfg) -> int:
    from .evaluation import decode_codes
    from .model import Pass, decode_batch
    from .tensor import Tensor
    ps = load_checkpoint(args.checkpoint)
    codes = read_latents(args.latents)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    if cfg["mode"] == "known":
        if not args.reference:
            raise CliError("--mode known needs --reference grids")
        refs = [oct.build(load_grid(p), ps.config.leaf_side) for p in args.reference]
        trees = decode_batch(Tensor(codes), ps, "known", refs, Pass(training=False)).trees
        grids = [oct.to_voxels(t) for t in trees]
    else:
        grids = decode_codes(ps, codes)
    for i, g in enumerate(grids):
        save_grid(g, os.path.join(out, f"decoded_{i:04d}.rvox"))
    print(f"wrote {len(grids)} grids to {out}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .evaluation import eval_reconstruction
    from .plotting import plot_eval
    ps = load_checkpoint(args.checkpoint)
    grids, _ = _load_grids(args)
    out = cfg["out"]
    write_config_echo(cfg, out)
    with thread_limits():
        report = eval_reconstruction(ps, grids, cfg["mode"], cfg["chamfer_points"], cfg["seed"])
    report.write_csv(os.path.join(out, f"eval_{cfg['mode']}.csv"))
    text = report.table()
    with open(os.path.join(out, f"eval_{cfg['mode']}.txt"), "w") as f:
        f.write(text + "\n")
    plot_eval(report, os.path.join(out, f"eval_{cfg['mode']}.png"))
    print(text)
    return 0


def cmd_sample(args, cfg) -> int:
    from .evaluation import generate_samples
    ps = load_checkpoint(args.checkpoint)
    latents = read_latents(args.latents)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    result = generate_samples(ps, latents, args.count, cfg["seed"])
    with open(os.path.join(out, "nearest.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample", "path", "nearest_training_index"])
        for i, (g, nn) in enumerate(zip(result.grids, result.nearest)):
            name = f"sample_{i:04d}.rvox"
            save_grid(g, os.path.join(out, name))
            w.writerow([i, name, int(nn)])
    write_latents(result.codes, os.path.join(out, "samples.rlat"))
    print(f"wrote {args.count} samples to {out}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import run_suite
    reports = run_suite(seed=cfg["seed"], grid_side=args.n or 8, leaf_side=args.k or 4)
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} gradient check(s) failed", file=sys.stderr)
        return 1
    return 0


def parse_configs(text: str) -> List[tuple]:
    pairs = []
    for item in text.split(","):
        n, k = item.split(":")
        pairs.append((int(n), int(k)))
    return pairs


def cmd_params(args, cfg) -> int:
    from .evaluation import complexity_report
    from .plotting import plot_param_growth
    configs = parse_configs(args.configs)
    report = complexity_report(configs, measure=args.measure, seed=cfg["seed"])
    print(report.table())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report.write_csv(os.path.join(args.out, "params.csv"))
        plot_param_growth(report, os.path.join(args.out, "params.png"))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--n", type=int, help="grid side N")
    common.add_argument("--k", type=int, help="leaf side k")
    common.add_argument("--latent-dim", dest="latent_dim", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--iterations", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--mode", choices=("predicted", "known"))
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rocnet", description="Recursive octree autoencoder for voxel grids.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic RVOX1 grids and a manifest")
    p.add_argument("--kind", default="sphere", help="shape kind or comma-separated kinds to cycle")
    p.add_argument("--count", type=int, default=10)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("octree", parents=[common], help="build, unbuild or inspect octrees")
    p.add_argument("action", choices=("build", "unbuild", "info"))
    p.add_argument("input")
    p.add_argument("output", nargs="?")
    p.set_defaults(func=cmd_octree)

    p = sub.add_parser("train", parents=[common], help="train an autoencoder or classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=("autoencode", "classify"))
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", parents=[common], help="encode grids to an RLAT1 latent file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("grids", nargs="*")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help="decode an RLAT1 file to grids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--reference", nargs="*", help="reference grids for known mode")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="score reconstructions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("grids", nargs="*")
    p.add_argument("--chamfer-points", dest="chamfer_points", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", parents=[common], help="generate grids from the latent convex hull")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--count", type=int, default=5)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of all ops")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", parents=[common], help="parameter counts per RocNet-N-k")
    p.add_argument("--configs", default="64:32,128:32,256:32,512:32,1024:32,2048:32",
                   help="comma-separated N:k pairs")
    p.add_argument("--measure", action="store_true", help="also time one iteration per config")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with thread_limits():
            return args.func(args, cfg)
    except (CliError, ValueError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"rocnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
