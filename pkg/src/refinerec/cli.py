"""``refinerec`` command line.

Exit codes: 0 success, 1 user error (bad input, config or flags),
2 contract violation (including a failed acceptance criterion).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ContractError, RefineRecError

logger = logging.getLogger("refinerec")

EXIT_OK, EXIT_USER, EXIT_CONTRACT = 0, 1, 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _id_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    from .data import (build_sequences, dataset_stats, five_core_filter, generate_synthetic,
                       ingest_csv, planted_rule, rule_frequency, save_dataset, write_csv)

    if args.synthetic:
        log = generate_synthetic(args.users, args.items, args.seq_len, args.strength, args.seed)
    elif args.input:
        log = ingest_csv(args.input)
    else:
        raise UserError("give --input CSV or --synthetic")
    filtered = five_core_filter(log, args.min_core, args.kcore_mode)
    ds = build_sequences(filtered, args.max_len)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"source": "synthetic" if args.synthetic else str(args.input),
            "min_core": args.min_core, "kcore_mode": args.kcore_mode, **log.meta}
    digest = save_dataset(ds, out / "dataset.json", meta)
    if args.synthetic:
        write_csv(log, out / "interactions.csv")

    stats = dataset_stats(ds)
    stats["malformed_rows"] = log.malformed
    stats["sha256"] = digest
    if args.synthetic:
        stats["order2_strength"] = args.strength
        stats["rule_frequency_generated"] = log.meta["rule_frequency"]
        stats["rule_frequency"] = rule_frequency(ds.sequences, planted_rule(log.meta, ds.item_ids))
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(json.dumps(stats, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _resolve_dataset(path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    if not path.exists():
        raise UserError(f"dataset not found: {path}")
    return path


def _load_split(path):
    from .data import leave_one_out_split, load_dataset

    ds, _ = load_dataset(path)
    return leave_one_out_split(ds)


def cmd_train(args) -> int:
    from .backbone import SeqRecModel
    from .config import RunConfig
    from .data import file_sha256
    from .evaluation import evaluate, format_table
    from .export import default_user, export_attention
    from .train import fit

    cfg = RunConfig.load(args.config)
    data_path = _resolve_dataset(cfg.data)
    split = _load_split(data_path)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    resolved = cfg.to_dict()
    provenance = {"seed": cfg.model.seed, "dataset": str(data_path),
                  "dataset_sha256": file_sha256(data_path)}
    if args.resume and (run_dir / "resolved_config.json").exists():
        previous = json.loads((run_dir / "resolved_config.json").read_text())
        if previous != resolved:
            raise UserError(f"{run_dir} was created with a different config; refusing to resume")
    (run_dir / "resolved_config.json").write_text(json.dumps(resolved, indent=2) + "\n")
    (run_dir / "provenance.json").write_text(json.dumps(provenance, indent=2) + "\n")

    model = SeqRecModel(cfg.model, split.num_items)
    res = fit(model, split, cfg.train, run_dir=run_dir, resume=args.resume)
    report = evaluate(res.model, split, "test", cfg.eval_ns, cfg.eval_mode, seed=cfg.model.seed)
    summary = {"best_epoch": res.state.best_epoch, "epochs": res.state.epoch,
               "best_valid_ndcg5": res.state.best_valid_ndcg5, "test": report.to_dict()}
    (run_dir / "metrics.json").write_text(json.dumps(summary, indent=2) + "\n")

    if cfg.export.enabled:
        user = cfg.export.user or default_user(split, cfg.export.last)
        export_attention(res.model, split, user, run_dir / "attention",
                         cfg.export.layer, cfg.export.head, cfg.export.last)
    print(format_table({cfg.model.mechanism: report}, cfg.eval_ns))
    print(f"best epoch {res.state.best_epoch} of {res.state.epoch}; artifacts in {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / export
# ---------------------------------------------------------------------------

def _checkpoint_and_split(checkpoint, data):
    from .checkpoint import load_checkpoint

    ckpt = Path(checkpoint)
    if not ckpt.exists():
        raise UserError(f"checkpoint not found: {ckpt}")
    model, meta = load_checkpoint(ckpt)
    if data is None:
        resolved = ckpt.parent / "resolved_config.json"
        if not resolved.exists():
            raise UserError("no --data given and no resolved_config.json next to the checkpoint")
        data = json.loads(resolved.read_text())["data"]
    split = _load_split(_resolve_dataset(data))
    if split.num_items != model.num_items:
        raise UserError(f"checkpoint has {model.num_items} items but the dataset has {split.num_items}")
    return model, split


def cmd_eval(args) -> int:
    from .evaluation import evaluate, format_table

    model, split = _checkpoint_and_split(args.checkpoint, args.data)
    report = evaluate(model, split, args.split, args.topn, args.mode, seed=args.seed)
    print(report.to_json())
    print(format_table({Path(args.checkpoint).stem: report}, args.topn))
    if args.output:
        Path(args.output).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    from .export import default_user, export_attention

    model, split = _checkpoint_and_split(args.checkpoint, args.data)
    user = args.user or default_user(split, args.last)
    paths = export_attention(model, split, user, args.out, args.layer, args.head, args.last)
    print(json.dumps({"user": user, "files": sorted(str(p) for p in paths.values())}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    from .bench import results_json, run_suite

    progress = (lambda line: print(line, file=sys.stderr, flush=True)) if not args.quiet else None
    results = run_suite(only=args.only, skip=args.skip or (), tamper_gradients=args.tamper_gradients,
                        progress=progress)
    text = results_json(results)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CONTRACT


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="refinerec", description="Sequential recommendation with attention-weight refinement.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="build a dataset from a CSV log or the synthetic generator",
                       description="Filter an interaction log to its k-core, build per-user sequences "
                                   "and write dataset.json plus stats.json.")
    s.add_argument("--input", help="CSV with user_id,item_id,timestamp columns")
    s.add_argument("--output", required=True, help="output directory")
    s.add_argument("--min-core", type=int, default=5, help="k for k-core filtering (default 5)")
    s.add_argument("--kcore-mode", choices=("both", "user"), default="both",
                   help="filter users and items, or users only (default both)")
    s.add_argument("--max-len", type=int, default=50, help="maximum sequence length n (default 50)")
    g = s.add_argument_group("synthetic data")
    g.add_argument("--synthetic", action="store_true", help="generate an order-2 synthetic log instead")
    g.add_argument("--users", type=int, default=1000, help="number of users (default 1000)")
    g.add_argument("--items", type=int, default=200, help="number of items (default 200)")
    g.add_argument("--seq-len", type=int, default=30, help="interactions per user (default 30)")
    g.add_argument("--strength", type=float, default=0.8, help="probability of the planted rule (default 0.8)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a model from a JSON run config",
                       description="Train, early-stop on validation NDCG@5, evaluate on test and write "
                                   "logs, checkpoints and metrics into the configured run directory.")
    s.add_argument("--config", required=True, help="JSON run config")
    s.add_argument("--resume", action="store_true", help="continue from run_dir/state.npz if present")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint",
                       description="Leave-one-out Recall@N and NDCG@N for a saved checkpoint.")
    s.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    s.add_argument("--data", help="dataset.json (default: the one recorded in the run directory)")
    s.add_argument("--split", choices=("test", "valid"), default="test", help="target split (default test)")
    s.add_argument("--topn", type=_id_list, default=[1, 5, 10, 20], help="cut-offs, e.g. 1,5,10 (default 1,5,10,20)")
    s.add_argument("--mode", default="full", help="'full' or 'sampled:k' (default full)")
    s.add_argument("--seed", type=int, default=0, help="negative-sampling seed for sampled mode (default 0)")
    s.add_argument("--output", help="also write the metrics JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-attention", help="export attention matrices for one user",
                       description="Write A, B and final attention weights over a user's last k positions "
                                   "as CSV files and k x k grayscale PNG images.")
    s.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    s.add_argument("--data", help="dataset.json (default: the one recorded in the run directory)")
    s.add_argument("--user", help="original user id (default: first user with a full window)")
    s.add_argument("--layer", type=int, default=0, help="layer index (default 0)")
    s.add_argument("--head", type=int, default=0, help="head index (default 0)")
    s.add_argument("--last", type=int, default=15, help="window size k (default 15)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_export_attention)

    s = sub.add_parser("bench", help="run the acceptance suite",
                       description="Run the acceptance criteria and print a JSON report with "
                                   "pass/fail and wall-clock seconds per criterion.")
    s.add_argument("--suite", choices=("acceptance",), default="acceptance", help="suite name")
    s.add_argument("--only", type=_id_list, help="criterion ids to run, e.g. 1,2,3")
    s.add_argument("--skip", type=_id_list, help="criterion ids to skip, e.g. 8")
    s.add_argument("--output", help="also write the JSON report here")
    s.add_argument("--quiet", action="store_true", help="no progress lines on stderr")
    s.add_argument("--tamper-gradients", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"refinerec: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (UserError, RefineRecError, OSError) as exc:
        print(f"refinerec: error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
