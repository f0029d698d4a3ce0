"""Command line interface.

    gencil gen-data  --out DIR [--config FILE] [--set KEY VALUE]... [--seed N]
    gencil pretrain  --data DIR --out FILE.gckp [--config ...] [--seed N]
    gencil run       --data DIR --checkpoint FILE.gckp --out DIR [--config ...]
    gencil report    --results PATH [PATH...] [--csv FILE]

Exit codes: 0 success, 2 usage/input/file-format problems, 3 a training
gate was not reached within its budget, 4 a broken internal invariant
(frozen weights drifted, non-finite numbers, impossible state).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import numerics as nm
from .checkpoint import CheckpointFormatError, read_checkpoint, write_checkpoint
from .config import DEFAULTS, apply_overrides, load_config, render_config, spec_from_config
from .data import Dataset, DatasetFormatError, gen_synthetic, read_dataset, write_dataset
from .errors import FrozenParamsError, GateError, InvariantError
from .pipeline import pretrain_all, run_stage

_SPLITS = ("pretrain", "train", "test")


def _effective_config(args) -> dict:
    cfg = load_config(args.config) if args.config else dict(DEFAULTS)
    cfg = apply_overrides(cfg, [(k, v) for k, v in (args.set or [])])
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _load_split(data_dir: str, split: str) -> Dataset:
    path = Path(data_dir) / f"{split}.gcil"
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return read_dataset(path)


def _cmd_gen_data(args) -> int:
    cfg = _effective_config(args)
    splits = gen_synthetic(spec_from_config(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in _SPLITS:
        write_dataset(splits[split], out / f"{split}.gcil")
    (out / "config.txt").write_text(render_config(cfg), encoding="utf-8")
    for split in _SPLITS:
        ds = splits[split]
        print(f"{split}: {len(ds)} examples, {len(ds.class_names)} classes "
              f"-> {out / (split + '.gcil')}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _effective_config(args)
    pre = _load_split(args.data, "pretrain")
    train = _load_split(args.data, "train")
    bundle = pretrain_all(pre, train.class_names, cfg, int(cfg["seed"]))
    write_checkpoint(bundle, args.out)
    print(f"encoder accuracy: {bundle.meta['encoder_accuracy']:.4f}")
    print(f"decoder caption loss: {bundle.meta['decoder_loss']:.4f}")
    print(f"vocabulary: {bundle.meta['vocab_size']} tokens")
    print(f"checkpoint -> {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = _effective_config(args)
    train = _load_split(args.data, "train")
    test = _load_split(args.data, "test")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    results = run_stage(read_checkpoint(ckpt), train, test, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(
        json.dumps(results, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    for method, summary in results["methods"].items():
        lines = ["# session  accuracy_pct"]
        lines += [f"{s} {100.0 * a:.4f}" for s, a in enumerate(summary["per_session"])]
        (out / f"{method}.dat").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"scheme {results['scheme']}, seed {results['seed']}, "
          f"{len(results['sessions'])} sessions")
    for method, summary in results["methods"].items():
        print(f"{method:>10}: Avg {summary['avg_pct']:6.2f}  Last {summary['last_pct']:6.2f}  "
              f"PD {summary['pd_pct']:6.2f}")
    print(f"results -> {out / 'results.json'}")
    return 0


def _load_results(path_arg: str) -> tuple[str, dict]:
    path = Path(path_arg)
    if path.is_dir():
        path = path / "results.json"
    if not path.is_file():
        raise FileNotFoundError(f"results not found: {path}")
    try:
        results = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed results {path}: line {e.lineno} column {e.colno}: "
                         f"{e.msg}") from None
    if not isinstance(results, dict) or results.get("schema_version") != 1:
        raise ValueError(f"unsupported results schema in {path}")
    return str(path), results


def _cmd_report(args) -> int:
    rows = []
    for path_arg in args.results:
        path, res = _load_results(path_arg)
        empties = res["counters"]["gmm_empty_generations"]
        for method, summary in res["methods"].items():
            rows.append({
                "file": path,
                "scheme": res["scheme"],
                "seed": res["seed"],
                "method": method,
                "sessions": len(summary["per_session"]),
                "avg_pct": summary["avg_pct"],
                "last_pct": summary["last_pct"],
                "pd_pct": summary["pd_pct"],
                "empty_generations": empties if method == "gmm" else
                res["counters"].get(f"{method}_empty_generations", 0),
            })
    header = f"{'scheme':<14} {'seed':>4} {'method':<10} {'sess':>4} " \
             f"{'Avg':>7} {'Last':>7} {'PD':>7} {'empty':>5}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(f"{r['scheme']:<14} {r['seed']:>4} {r['method']:<10} {r['sessions']:>4} "
              f"{r['avg_pct']:>7.2f} {r['last_pct']:>7.2f} {r['pd_pct']:>7.2f} "
              f"{r['empty_generations']:>5}")
    if args.csv:
        import csv
        fields = ["file", "scheme", "seed", "method", "sessions",
                  "avg_pct", "last_pct", "pd_pct", "empty_generations"]
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
        print(f"csv -> {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gencil",
                                     description="class-incremental learning as caption generation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", nargs=2, action="append", metavar=("KEY", "VALUE"),
                       help="override one config key (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset splits")
    common(p)
    p.add_argument("--out", required=True, help="output directory for .gcil files")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain encoder and decoder, write checkpoint")
    common(p)
    p.add_argument("--data", required=True, help="directory with the .gcil splits")
    p.add_argument("--out", required=True, help="checkpoint path (.gckp)")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("run", help="run the incremental benchmark and baselines")
    common(p)
    p.add_argument("--data", required=True, help="directory with the .gcil splits")
    p.add_argument("--checkpoint", required=True, help="pretrained .gckp file")
    p.add_argument("--out", required=True, help="output directory for results")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="tabulate one or more results files")
    p.add_argument("--results", nargs="+", required=True,
                   help="results.json files (or their directories)")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if not e.code else 2
    try:
        return args.func(args)
    except GateError as e:
        print(f"gencil: {e}", file=sys.stderr)
        return 3
    except (InvariantError, FrozenParamsError, nm.NonFiniteError) as e:
        print(f"gencil: {e}", file=sys.stderr)
        return 4
    except (DatasetFormatError, CheckpointFormatError, FileNotFoundError,
            IsADirectoryError, ValueError, OSError) as e:
        print(f"gencil: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
