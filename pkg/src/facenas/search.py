"""Warm-up and joint architecture search, persistence, and finalist selection."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .child import DivergedError, TrainConfig, instantiate, rmse_np, train_from_scratch
from .controller import ControllerPolicy, marginal_probabilities, restrict
from .data import PreparedData
from .ppo import JointController, JointSample, MotionAverageTracker, PPOConfig, UpdateBatch, update_controllers
from .space import Architecture, ReducedSpace, SearchSpace, enumerate_joint, parse_key, reduce_by_marginals
from .tensor import ContractError


class StageFailure(RuntimeError):
    """Every trial of a stage diverged."""


@dataclass
class SearchBudget:
    steps: int
    samples: int
    workers: int = 1
    wall_clock: float = 0.0  # seconds, 0 disables the cap

    def __post_init__(self):
        if self.steps < 1 or self.samples < 1:
            raise ValueError(f"budget needs at least one step and one sample, got T={self.steps}, N={self.samples}")
        if self.workers < 1:
            raise ValueError("worker count must be positive")


@dataclass
class SearchContext:
    """Everything a trial needs; shipped once to each worker process."""

    data: PreparedData
    streams: list[SearchSpace]
    fusion: SearchSpace | None
    train: TrainConfig
    mode: str = "joint"

    @property
    def penalty(self) -> float:
        """Error assigned to diverged trials: twice the error of predicting the training mean."""
        return 2.0 * rmse_np(np.full(len(self.data.val), float(np.mean(self.data.train.y))), self.data.val.y)


@dataclass
class LeaderboardEntry:
    key: str
    count: int
    mean_error: float

    def to_dict(self) -> dict:
        return {"key": self.key, "count": self.count, "mean_error": self.mean_error}


@dataclass
class SearchRunState:
    stage: str
    t: int
    controller: JointController
    tracker: MotionAverageTracker
    leaderboard: list[LeaderboardEntry] = field(default_factory=list)
    trials: list[dict] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    complete: bool = False
    run_dir: Path | None = None

    @property
    def trial_count(self) -> int:
        return len(self.trials)


# ------------------------------------------------------------------ trials

_WORKER_CTX: SearchContext | None = None


def _init_worker(ctx: SearchContext):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def run_trial(ctx: SearchContext, key: str, seed: int) -> dict:
    """Instantiate ``key`` from scratch, train it and report its validation error."""
    arch = parse_key(key)
    start = time.perf_counter()
    model = instantiate(arch, ctx.streams, ctx.fusion if ctx.mode == "joint" else None, ctx.data.input_shapes,
                        ctx.data.graphs, ctx.mode, seed, ctx.train)
    try:
        res = train_from_scratch(model, ctx.data.train, ctx.data.val, ctx.train, seed)
    except DivergedError as exc:
        return {"key": key, "seed": seed, "val_error": None, "diverged": True, "epoch": exc.epoch,
                "wall_time": time.perf_counter() - start}
    return {"key": key, "seed": seed, "val_error": res.val_error, "train_error": res.train_error,
            "diverged": False, "best_epoch": res.best_epoch, "wall_time": res.wall_time}


def _worker_trial(job: tuple[str, int]) -> dict:
    return run_trial(_WORKER_CTX, *job)


def _run_batch(ctx: SearchContext, jobs: list[tuple[str, int]], pool) -> list[dict]:
    if pool is None:
        return [run_trial(ctx, *job) for job in jobs]
    return list(pool.map(_worker_trial, jobs))


def stage_code(stage: str) -> int:
    return zlib.crc32(stage.encode("utf-8"))


# ------------------------------------------------------------------ leaderboard

def rank_leaderboard(tracker: MotionAverageTracker, k: int | None = None) -> list[LeaderboardEntry]:
    """Repeatedly observed architectures first, then ascending mean error, more observations, key."""
    entries = [LeaderboardEntry(key, n, m) for key, n, m in tracker.items()]
    entries.sort(key=lambda e: (e.count < 2, e.mean_error, -e.count, e.key))
    return entries[:k] if k else entries


def leaderboard_json(entries: Sequence[LeaderboardEntry]) -> str:
    return json.dumps([e.to_dict() for e in entries], indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------ persistence helpers

def _atomic_write(path: Path, text: str | bytes):
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(text, bytes):
        tmp.write_bytes(text)
    else:
        tmp.write_text(text)
    os.replace(tmp, path)


def _save_ckpt(path: Path, state: dict):
    tmp = path.with_name(path.name + ".tmp")
    T.save_checkpoint(tmp, state)
    os.replace(tmp, path)


METRIC_FIELDS = ("t", "mean_val_error", "mean_reward", "reward_std", "objective", "clip_fraction", "entropy",
                 "baseline", "hit_rate", "diverged")


def _metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("t", "diverged") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# ------------------------------------------------------------------ search loop

def search_loop(ctx: SearchContext, controller: JointController, budget: SearchBudget, seed: int,
                stage: str = "joint", run_dir: str | Path | None = None, resume: bool = False,
                leaderboard_size: int = 10, stop_after: int | None = None) -> SearchRunState:
    """Sample N architectures per step, train each from scratch, score, update the controllers.

    With ``run_dir`` every step is committed to disk (trials, tracker log,
    controller checkpoint, metrics, leaderboard, state); ``resume`` picks up
    after the last committed step. ``stop_after`` halts after that many steps
    in this call, which is how an interruption is simulated.
    """
    cfg = controller.cfg
    run_dir = Path(run_dir) if run_dir else None
    paths = _stage_paths(run_dir) if run_dir else None
    trials: list[dict] = []
    metrics: list[dict] = []
    t0 = 0
    if paths:
        paths["policies"].mkdir(parents=True, exist_ok=True)
        if paths["state"].exists():
            if not resume:
                raise FileExistsError(f"{run_dir} already holds a run; resume it or choose another directory")
            trials, metrics, t0 = _restore(paths, controller, stage)
        else:
            for key in ("trials", "tracker", "metrics"):
                paths[key].unlink(missing_ok=True)
    tracker = MotionAverageTracker()
    for rec in trials:
        tracker.update(rec["key"], rec["tracked_error"])
    if paths:
        _atomic_write(paths["tracker"], "".join(f"{r['key']}\t{float(r['tracked_error']).hex()}\n" for r in trials))
        tracker.log_path = paths["tracker"]

    penalty = ctx.penalty
    code = stage_code(stage)
    started = time.perf_counter()
    complete = True
    pool = ProcessPoolExecutor(budget.workers, initializer=_init_worker, initargs=(ctx,)) \
        if budget.workers > 1 else None
    try:
        steps_done = 0
        for t in range(t0 + 1, budget.steps + 1):
            if stop_after is not None and steps_done >= stop_after:
                complete = False
                break
            if budget.wall_clock and time.perf_counter() - started > budget.wall_clock:
                complete = False
                break
            rng = T.make_rng(seed, code, t)
            samples: list[JointSample] = [controller.sample(rng) for _ in range(budget.samples)]
            jobs = [(s.key, T.derive_seed(seed, code, t, i)) for i, s in enumerate(samples)]
            results = _run_batch(ctx, jobs, pool)
            rewards, errors, diverged, hits = [], [], 0, 0
            new_records = []
            for i, (s, res) in enumerate(zip(samples, results)):
                raw = res["val_error"]
                if res["diverged"]:
                    diverged += 1
                tracked = penalty if raw is None else min(float(raw), penalty)
                hits += s.key in tracker
                mean = tracker.update(s.key, tracked)
                rewards.append(-mean if cfg.motion_average else -tracked)
                errors.append(tracked)
                new_records.append({"stage": stage, "t": t, "i": i, **res, "tracked_error": tracked,
                                    "log_prob_old": s.log_prob_old, "reward": rewards[-1]})
            trials.extend(new_records)
            if paths:
                with open(paths["trials"], "a") as fh:
                    for rec in new_records:
                        fh.write(json.dumps(rec, sort_keys=True) + "\n")
            um = update_controllers(controller, UpdateBatch(samples, rewards))
            row = {"t": t, "mean_val_error": float(np.mean(errors)), "mean_reward": um.mean_reward,
                   "reward_std": float(np.std(rewards)), "objective": um.objective,
                   "clip_fraction": um.clip_fraction, "entropy": um.entropy, "baseline": um.baseline,
                   "hit_rate": hits / len(samples), "diverged": diverged}
            metrics.append(row)
            steps_done += 1
            if paths:
                _save_ckpt(paths["policy"], controller.state())
                _atomic_write(paths["metrics"], _metrics_csv(metrics))
                _atomic_write(paths["leaderboard"], leaderboard_json(rank_leaderboard(tracker, leaderboard_size)))
                _atomic_write(paths["state"], json.dumps({"stage": stage, "t": t, "complete": t == budget.steps},
                                                         sort_keys=True) + "\n")
    finally:
        if pool is not None:
            pool.shutdown()
    t_final = metrics[-1]["t"] if metrics else t0
    state = SearchRunState(stage, t_final, controller, tracker, rank_leaderboard(tracker, leaderboard_size),
                           trials, metrics, complete and t_final == budget.steps, run_dir)
    if trials and all(r["diverged"] for r in trials):
        raise StageFailure(f"stage {stage}: all {len(trials)} trials diverged "
                           f"(epochs {sorted({r['epoch'] for r in trials})})")
    return state


def _stage_paths(run_dir: Path) -> dict[str, Path]:
    return {"trials": run_dir / "trials.jsonl", "tracker": run_dir / "tracker.log",
            "policies": run_dir / "policies", "policy": run_dir / "policies" / "controller.ckpt",
            "metrics": run_dir / "metrics.csv", "leaderboard": run_dir / "leaderboard.json",
            "state": run_dir / "state.json"}


def _restore(paths: dict[str, Path], controller: JointController, stage: str):
    state = json.loads(paths["state"].read_text())
    if state["stage"] != stage:
        raise ValueError(f"run directory holds stage {state['stage']!r}, not {stage!r}")
    t0 = int(state["t"])
    controller.load_state(T.load_checkpoint(paths["policy"]))
    trials = []
    if paths["trials"].exists():
        trials = [json.loads(l) for l in paths["trials"].read_text().splitlines() if l.strip()]
    # steps after the last commit are discarded and rerun
    trials = [r for r in trials if r["t"] <= t0]
    _atomic_write(paths["trials"], "".join(json.dumps(r, sort_keys=True) + "\n" for r in trials))
    metrics = [r for r in read_metrics(paths["metrics"]) if r["t"] <= t0] if paths["metrics"].exists() else []
    return trials, metrics, t0


# ------------------------------------------------------------------ stages

def new_controller(streams: Sequence[SearchSpace], fusion: SearchSpace | None, ppo: PPOConfig, hidden: int,
                   seed: int, policies: dict[str, ControllerPolicy] | None = None) -> JointController:
    pols = {}
    for j, s in enumerate(streams):
        pols[s.name] = (policies or {}).get(s.name) or ControllerPolicy(s, hidden, T.derive_seed(seed, 101, j))
    fpol = None
    if fusion is not None:
        fpol = ControllerPolicy(fusion, hidden, T.derive_seed(seed, 102), "fusion", [s.name for s in streams])
    return JointController(pols, fpol, ppo)


@dataclass
class WarmupResult:
    policy: ControllerPolicy
    reduced: ReducedSpace
    state: SearchRunState
    marginals: list[np.ndarray]


def warmup_stream(space: SearchSpace, data: PreparedData, budget: SearchBudget, train: TrainConfig, ppo: PPOConfig,
                  seed: int, hidden: int = 64, keep_per_slot: int = 2, reduction_samples: int = 1000,
                  run_dir=None, resume: bool = False) -> WarmupResult:
    """Pre-search one stream on its own (standalone head), then shrink its space to the likeliest choices."""
    ctx = SearchContext(data, [space], None, train, mode="standalone")
    controller = new_controller([space], None, ppo, hidden, seed)
    state = search_loop(ctx, controller, budget, seed, f"warmup/{space.name}", run_dir, resume)
    policy = controller.streams[space.name]
    marg = marginal_probabilities(policy, reduction_samples, T.derive_seed(seed, 103))
    reduced = reduce_by_marginals(space, marg, keep_per_slot, provenance=f"warmup seed={seed} steps={state.t}")
    if run_dir:
        _atomic_write(Path(run_dir) / "reduced_space.json", json.dumps(
            {"space": reduced.space.to_dict(), "kept": [list(k) for k in reduced.kept],
             "marginals": [m.tolist() for m in marg], "provenance": reduced.provenance}, indent=2, sort_keys=True))
    return WarmupResult(policy, reduced, state, marg)


def joint_search(streams: Sequence[SearchSpace], fusion: SearchSpace | None, data: PreparedData,
                 budget: SearchBudget, train: TrainConfig, ppo: PPOConfig, seed: int, hidden: int = 64,
                 warm_policies: dict[str, ControllerPolicy] | None = None, run_dir=None, resume: bool = False,
                 leaderboard_size: int = 10, stop_after: int | None = None) -> SearchRunState:
    ctx = SearchContext(data, list(streams), fusion, train, mode="joint")
    controller = new_controller(streams, fusion, ppo, hidden, seed, warm_policies)
    return search_loop(ctx, controller, budget, seed, "joint", run_dir, resume, leaderboard_size, stop_after)


def run_search(cfg, data: PreparedData, run_dir=None, resume: bool = False,
               stop_after: int | None = None) -> tuple[SearchRunState, list[SearchSpace], dict[str, WarmupResult]]:
    """Warm-up per stream (unless skipped) followed by the joint search, as described by a RunConfig."""
    streams = cfg.stream_spaces()
    b = cfg.budget
    workers = cfg.workers()
    run_dir = Path(run_dir) if run_dir else None
    warm: dict[str, WarmupResult] = {}
    if not b.skip_warmup and b.warmup_steps > 0:
        wb = SearchBudget(b.warmup_steps, cfg.ppo.samples, workers)
        for j, s in enumerate(streams):
            sub = run_dir / "warmup" / s.name if run_dir else None
            warm[s.name] = warmup_stream(s, data, wb, cfg.train, cfg.ppo, T.derive_seed(cfg.seed, 104, j),
                                         cfg.controller_hidden, b.keep_per_slot, b.reduction_samples, sub,
                                         resume and sub is not None and (sub / "state.json").exists())
    reduced = [warm[s.name].reduced.space if s.name in warm else s for s in streams]
    policies = {s.name: restrict(warm[s.name].policy, warm[s.name].reduced) for s in streams if s.name in warm}
    fusion = cfg.fusion_space(reduced)
    jb = SearchBudget(b.joint_steps, cfg.ppo.samples, workers, b.wall_clock)
    state = joint_search(reduced, fusion, data, jb, cfg.train, cfg.ppo, cfg.seed, cfg.controller_hidden, policies,
                         run_dir, resume and run_dir is not None and (run_dir / "state.json").exists(),
                         b.leaderboard_size, stop_after)
    if run_dir:
        _atomic_write(run_dir / "spaces.json", json.dumps(
            {"streams": [s.to_dict() for s in reduced], "fusion": fusion.to_dict()}, indent=2, sort_keys=True))
    return state, reduced, warm


# ------------------------------------------------------------------ oracle

def exhaustive_oracle(streams: Sequence[SearchSpace], fusion: SearchSpace | None, data: PreparedData,
                      train: TrainConfig, repeats: int = 3, seed: int = 0, mode: str = "joint",
                      limit: int = 4096) -> dict[str, float]:
    """Mean validation error of every architecture in the space, each trained ``repeats`` times."""
    ctx = SearchContext(data, list(streams), fusion, train, mode)
    penalty = ctx.penalty
    out = {}
    for idx, arch in enumerate(enumerate_joint(streams, fusion if mode == "joint" else None, limit)):
        errs = []
        for r in range(repeats):
            res = run_trial(ctx, arch.key, T.derive_seed(seed, 105, idx, r))
            errs.append(penalty if res["val_error"] is None else min(res["val_error"], penalty))
        out[arch.key] = float(np.mean(errs))
    return out


# ------------------------------------------------------------------ finalists

def architecture_labels(key: str, streams: Sequence[SearchSpace], fusion: SearchSpace | None) -> dict:
    arch = parse_key(key)
    by_name = {s.name: s for s in streams}
    out = {name: by_name[name].labels(toks) for name, toks in arch.streams}
    if fusion is not None and arch.fusion:
        out["fusion"] = fusion.labels(arch.fusion)
    return out


def finalize(leaderboard: Sequence[LeaderboardEntry], streams: Sequence[SearchSpace], fusion: SearchSpace | None,
             data: PreparedData, train: TrainConfig, seed: int, finalists: int = 3, seeds: int = 3,
             mode: str = "joint") -> dict:
    """Retrain the leading architectures on train+validation and score them on the test split."""
    if not leaderboard:
        raise ContractError("cannot finalize an empty leaderboard")
    full = data.full_train()
    rows = []
    for rank, entry in enumerate(leaderboard[:finalists]):
        arch = parse_key(entry.key)
        per_seed = []
        for r in range(seeds):
            s = T.derive_seed(seed, 106, r)
            model = instantiate(arch, streams, fusion if mode == "joint" else None, data.input_shapes, data.graphs,
                                mode, s, train)
            try:
                train_from_scratch(model, full, None, train, s)
                pred = model.predict_batch(data.test.inputs)
                per_seed.append({"seed": s, "rmse": rmse_np(pred, data.test.y),
                                 "mae": float(np.mean(np.abs(pred - data.test.y))),
                                 "predictions": [float(p) for p in pred]})
            except DivergedError as exc:
                per_seed.append({"seed": s, "rmse": math.inf, "mae": math.inf, "diverged_epoch": exc.epoch})
        rows.append({"rank": rank + 1, "key": entry.key, "count": entry.count, "search_error": entry.mean_error,
                     "labels": architecture_labels(entry.key, streams, fusion),
                     "rmse": float(np.mean([p["rmse"] for p in per_seed])),
                     "mae": float(np.mean([p["mae"] for p in per_seed])),
                     "seeds": [p["seed"] for p in per_seed], "per_seed": per_seed})
    best = min(rows, key=lambda r: (r["rmse"], r["rank"]))
    for r in rows:
        r["best"] = r is best
    return {"finalists": rows, "best": best["key"], "test_clip_ids": list(data.test.clip_ids),
            "test_labels": [float(v) for v in data.test.y]}
