"""Command-line entry point: ``quantnas <command> [flags]``.

Exit codes: 0 success, 1 configuration error, 2 runtime abort (non-finite
loss), 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, dump_config, load_config, toy_preset
from .data import ToyTask, load_dataset, make_patch_pairs, toy_task, write_dataset
from .objective import cost_report, espcn_report
from .search import (
    SearchAborted,
    bicubic_psnr,
    evaluate,
    history_to_csv,
    pareto_sweep,
    retrain,
    search,
    sweep_to_csv,
    timing_bench,
    timing_ratios,
    timing_to_csv,
)
from .supernet import Genotype, build_supernet, instantiate
from .tensor import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3

logger = logging.getLogger("quantnas")


# -- shared plumbing ----------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    cfg = toy_preset() if getattr(args, "toy", False) else RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    if getattr(args, "space", None):
        cfg = load_config(args.space, cfg)
    if getattr(args, "seed", None) is not None:
        seed = args.seed
        cfg = replace(cfg, search=replace(cfg.search, seed=seed), train=replace(cfg.train, seed=seed))
    if getattr(args, "strategy", None):
        cfg = replace(cfg, search=replace(cfg.search, strategy=args.strategy))
    if getattr(args, "bits", None):
        bits = tuple(int(b) for b in args.bits.split(","))
        cfg = replace(cfg, space=replace(cfg.space, bits=bits))
        cfg.space.validate()
    if getattr(args, "eta", None):
        cfg = replace(cfg, etas=list(args.eta), search=replace(cfg.search, eta=args.eta[0]))
    return cfg


def build_task(cfg: RunConfig) -> ToyTask:
    """Synthetic task, or a split of a PNG directory when ``image_dir`` is set."""
    d, scale = cfg.data, cfg.space.scale
    if d.image_dir is None:
        return toy_task(
            d.seed, scale, d.n_train_images, d.n_test_images, d.image_hw, d.lr_patch, d.lr_stride
        )
    pairs = load_dataset(d.image_dir, scale)
    n = len(pairs)
    if n < 3:
        raise ConfigurationError(f"{d.image_dir} needs at least 3 images for two training splits and a test set")
    order = np.random.default_rng(d.seed).permutation(n)
    n_test = max(1, n // 4)
    test, rest = order[:n_test], order[n_test:]
    half = len(rest) // 2
    hr = pairs.hr
    return ToyTask(
        make_patch_pairs(hr[np.sort(rest[:half])], scale, d.lr_patch, d.lr_stride),
        make_patch_pairs(hr[np.sort(rest[half:])], scale, d.lr_patch, d.lr_stride),
        pairs.subset(np.sort(test)),
        pairs.subset(np.sort(rest)),
    )


def _out_dir(path: Optional[str], default: str) -> Path:
    out = Path(path or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}")


# -- commands -------------------------------------------------------------------------

def cmd_search(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args.out, "runs/search")
    task = build_task(cfg)
    net = build_supernet(cfg.space, cfg.search.strategy, cfg.search.seed, **cfg.edge.as_kwargs())
    try:
        genotype, history = search(net, task.alpha_split, task.weight_split, cfg.search)
    except SearchAborted as exc:
        (out / "abort_snapshot.json").write_text(json.dumps(exc.snapshot, indent=2, sort_keys=True) + "\n")
        raise
    genotype.save(out / "genotype.json")
    _write(out / "history.csv", history_to_csv(history))
    _write(out / "config.ini", dump_config(cfg))
    print(f"wrote {out / 'genotype.json'}")
    return EXIT_OK


def cmd_retrain(args) -> int:
    cfg = _resolve_config(args)
    genotype = Genotype.load(args.genotype)
    out = _out_dir(args.out, "runs/retrain")
    task = build_task(cfg)
    net, metrics = retrain(genotype, task.train, task.test, cfg.train, cfg.space.adq, cfg.space.adq_bn)
    np.savez(out / "weights.npz", **net.state_dict())
    _write(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    genotype = Genotype.load(args.genotype)
    net = instantiate(genotype, seed=cfg.train.seed, adq=cfg.space.adq, adq_bn=cfg.space.adq_bn)
    with np.load(args.weights) as z:
        net.load_state_dict({k: z[k] for k in z.files})
    if args.data:
        test = load_dataset(args.data, genotype.scale)
    else:
        test = build_task(cfg).test
    rows = ["name,psnr_db"]
    rows.append(f"model,{evaluate(net, test, cfg.train.eval_crop)!r}")
    rows.append(f"bicubic,{bicubic_psnr(test, cfg.train.eval_crop)!r}")
    text = "\n".join(rows) + "\n"
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_cost(args) -> int:
    hw = (args.image, args.image)
    if args.preset == "espcn":
        report = espcn_report(bits=args.bits_value, image_hw=hw, scale=args.scale)
    elif args.genotype:
        report = cost_report(Genotype.load(args.genotype), hw)
    else:
        raise ConfigurationError("cost needs --preset espcn or --genotype PATH")
    text = report.to_csv()
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    print(f"total_flops={report.total_flops:.6g} total_bitops={report.total_bitops:.6g}", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args.out, "runs/sweep")
    task = build_task(cfg)
    results, front = pareto_sweep(
        cfg.space, task, cfg.etas, cfg.search, cfg.train, out_dir=out, **cfg.edge.as_kwargs()
    )
    _write(out / "sweep.csv", sweep_to_csv(results, front))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    strategies = args.strategies or ["independent", "shared", "san"]
    counts = [int(c) for c in args.bit_counts.split(",")]
    rows = timing_bench(
        strategies, counts, iterations=args.iterations, batch_size=args.batch_size,
        lr_hw=(args.image, args.image), space=cfg.space, seed=cfg.search.seed, repeats=args.repeats,
    )
    text = timing_to_csv(rows)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    for n, ratios in timing_ratios(rows).items():
        print(f"|B|={n}: " + ", ".join(f"{k}={v:.3f}" for k, v in ratios.items()), file=sys.stderr)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    hw = (args.size, args.size)
    manifest = write_dataset(args.out, n_images=args.n, image_hw=hw, seed=args.seed, scale=args.scale)
    print(f"wrote {len(manifest['files'])} files to {args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--space", help="INI file with a [space] section (overrides --config)")
    p.add_argument("--toy", action="store_true", help="start from the calibrated toy preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", choices=["independent", "shared", "san"])
    p.add_argument("--bits", help="comma separated candidate bit widths, e.g. 4,8")
    p.add_argument("--eta", type=float, action="append", help="hardware penalty weight (repeatable)")
    p.add_argument("--out")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantnas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the architecture search")
    _common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("retrain", help="train a genotype from scratch")
    _common(p)
    p.add_argument("--genotype", required=True)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", help="PSNR of trained weights")
    _common(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", help="dataset directory (default: the configured synthetic test set)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="FLOPs/BitOps report")
    p.add_argument("--preset", choices=["espcn"])
    p.add_argument("--genotype")
    p.add_argument("--bits", dest="bits_value", type=int, default=8)
    p.add_argument("--image", type=int, default=32)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("sweep", help="search and retrain over several eta values")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench-timing", help="wall-clock of the mixing strategies")
    _common(p)
    p.add_argument("--strategies", nargs="+", choices=["independent", "shared", "san"])
    p.add_argument("--bit-counts", default="1,2,3")
    p.add_argument("--iterations", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--image", type=int, default=16, help="low-resolution input side")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", help="write a deterministic synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--scale", type=int, default=2)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SearchAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, ValueError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
