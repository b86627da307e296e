"""Command-line entry point: ``facenas <subcommand> --config run.toml``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import WORKERS_ENV, RunConfig, toy_config
from .data import EncodedDataset, IngestError, write_dataset
from .metrics import PredictionSet, mae, rmse
from .pipeline import encode, layout_for, load_records, prepared
from .search import (LeaderboardEntry, SearchBudget, StageFailure, finalize, run_search, warmup_stream)
from .space import SearchSpace
from .tensor import ContractError

log = logging.getLogger("facenas")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facenas", description=__doc__,
                                epilog=f"Set {WORKERS_ENV} to override the number of trial workers.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="RunConfig TOML (default: <run-dir>/config.toml)")
        sp.add_argument("--run-dir", type=Path, help="override output_dir from the config")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    add("init", "write the toy benchmark config to --config").add_argument("--seed", type=int, default=0)
    add("gen-data", "write the synthetic corpus as CSV files").add_argument("--out", type=Path)
    add("encode", "encode clips to spectra (<run-dir>/encoded.ckpt)")
    add("warmup", "run the per-stream warm-up searches only")
    s = add("search", "warm-up (unless skipped) and joint search")
    s.add_argument("--resume", action="store_true", help="continue an interrupted run")
    s.add_argument("--stop-after", type=int, help="stop after this many joint steps (leaves the run resumable)")
    add("finalize", "retrain the top architectures on train+val and score them on test")
    e = add("evaluate", "RMSE/MAE of a predictions CSV, or the landmark stream ablation")
    g = e.add_mutually_exclusive_group(required=True)
    g.add_argument("--predictions", type=Path, help="CSV with clip_id,prediction,target")
    g.add_argument("--ablation", action="store_true", help="compare GNN and CNN landmark streams")
    e.add_argument("--seeds", type=int, default=3)
    add("report", "write CSV tables and SVG plots for a run")
    return p


def _load(args) -> tuple[RunConfig, Path]:
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file {args.config} not found")
        cfg = RunConfig.load(args.config)
    elif args.run_dir is not None and (args.run_dir / "config.toml").exists():
        cfg = RunConfig.load(args.run_dir / "config.toml")
    else:
        raise UsageError("pass --config, or --run-dir of a directory holding config.toml")
    run_dir = args.run_dir or Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return cfg, run_dir


def _data(cfg: RunConfig, run_dir: Path):
    enc_path = run_dir / "encoded.ckpt"
    enc = EncodedDataset.load(enc_path, layout_for(cfg)) if enc_path.exists() else None
    return prepared(cfg, enc)


def _snapshot(cfg: RunConfig, run_dir: Path, resume: bool):
    path = run_dir / "config.toml"
    text = cfg.dumps()
    if resume and path.exists() and path.read_text() != text:
        raise UsageError(f"{path} differs from the given config; refusing to resume a different run")
    path.write_text(text)


def cmd_init(args) -> int:
    if args.config is None:
        raise UsageError("init needs --config PATH to write")
    cfg = toy_config(args.seed, str(args.run_dir or "run"))
    cfg.save(args.config)
    print(f"wrote {args.config}")
    return 0


def cmd_gen_data(args) -> int:
    cfg, run_dir = _load(args)
    if cfg.data.source != "synthetic":
        raise UsageError("gen-data needs data.source = 'synthetic'")
    out = write_dataset(load_records(cfg)[0], args.out or run_dir / "data")
    print(f"wrote {cfg.data.synthetic.n_clips} clips to {out}")
    return 0


def cmd_encode(args) -> int:
    cfg, run_dir = _load(args)
    enc = encode(cfg)
    enc.save(run_dir / "encoded.ckpt")
    print(f"encoded {len(enc)} clips, K={enc.K}, attributes {sorted(enc.amplitude)}")
    return 0


def cmd_warmup(args) -> int:
    cfg, run_dir = _load(args)
    _snapshot(cfg, run_dir, True)
    data = _data(cfg, run_dir)
    if cfg.budget.warmup_steps < 1:
        raise UsageError("budget.warmup_steps must be at least 1 for a warm-up run")
    b = SearchBudget(cfg.budget.warmup_steps, cfg.ppo.samples, cfg.workers())
    for j, s in enumerate(cfg.stream_spaces()):
        from .tensor import derive_seed
        sub = run_dir / "warmup" / s.name
        res = warmup_stream(s, data, b, cfg.train, cfg.ppo, derive_seed(cfg.seed, 104, j), cfg.controller_hidden,
                            cfg.budget.keep_per_slot, cfg.budget.reduction_samples, sub,
                            (sub / "state.json").exists())
        print(f"{s.name}: {s.size} -> {res.reduced.size} architectures")
    return 0


def cmd_search(args) -> int:
    cfg, run_dir = _load(args)
    _snapshot(cfg, run_dir, args.resume)
    if not args.resume and (run_dir / "state.json").exists():
        raise UsageError(f"{run_dir} already holds a search; pass --resume or use another --run-dir")
    state, _, _ = run_search(cfg, _data(cfg, run_dir), run_dir, args.resume, args.stop_after)
    status = "complete" if state.complete else "incomplete"
    print(f"search {status} at t={state.t}: {state.trial_count} trials")
    for i, e in enumerate(state.leaderboard[:3], 1):
        print(f"  {i}. {e.key}  error={e.mean_error:.4f}  n={e.count}")
    return 0


def cmd_finalize(args) -> int:
    cfg, run_dir = _load(args)
    spaces = json.loads((run_dir / "spaces.json").read_text())
    streams = [SearchSpace.from_dict(d) for d in spaces["streams"]]
    fusion = SearchSpace.from_dict(spaces["fusion"])
    board = [LeaderboardEntry(**e) for e in json.loads((run_dir / "leaderboard.json").read_text())]
    report = finalize(board, streams, fusion, _data(cfg, run_dir), cfg.train, cfg.seed, cfg.budget.finalists,
                      cfg.budget.final_seeds)
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for r in report["finalists"]:
        mark = "*" if r["best"] else " "
        print(f"{mark} {r['rank']}. {r['key']}  RMSE={r['rmse']:.4f}  MAE={r['mae']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    if args.predictions is not None:
        preds = PredictionSet.from_csv(args.predictions)
        print(f"RMSE={rmse(preds):.4f} MAE={mae(preds):.4f} n={len(preds)}")
        return 0
    from .ablation import landmark_ablation
    from .report import ablation_csv
    cfg, run_dir = _load(args)
    enc_path = run_dir / "encoded.ckpt"
    enc = EncodedDataset.load(enc_path, layout_for(cfg)) if enc_path.exists() else encode(cfg)
    budget = SearchBudget(max(cfg.budget.joint_steps, 1), cfg.ppo.samples, cfg.workers())
    rows = landmark_ablation(enc, range(args.seeds), budget, cfg.train, cfg.ppo, cfg.controller_hidden,
                             cfg.data.split_seed)
    (run_dir / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(ablation_csv(rows))
    return 0


def cmd_report(args) -> int:
    from .report import write_report
    _, run_dir = _load(args)
    for p in write_report(run_dir):
        print(p)
    return 0


COMMANDS = {"init": cmd_init, "gen-data": cmd_gen_data, "encode": cmd_encode, "warmup": cmd_warmup,
            "search": cmd_search, "finalize": cmd_finalize, "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"facenas: error: {exc}", file=sys.stderr)
        return 2
    except (StageFailure, IngestError, ContractError, FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"facenas {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
