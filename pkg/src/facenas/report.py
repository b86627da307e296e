"""Tables and SVG plots written from a finished run directory."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .search import read_metrics

W, H, PAD = 480, 320, 48


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _scale(vals: Sequence[float], lo_px: float, hi_px: float):
    lo, hi = min(vals), max(vals)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lambda v: lo_px + (v - lo) / (hi - lo) * (hi_px - lo_px), lo, hi


def _frame(title: str, xlabel: str, ylabel: str, xr, yr) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        f'<text x="{PAD}" y="{H - PAD + 16}" font-size="10">{_fmt(xr[0])}</text>',
        f'<text x="{W - PAD}" y="{H - PAD + 16}" text-anchor="end" font-size="10">{_fmt(xr[1])}</text>',
        f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end" font-size="10">{_fmt(yr[0])}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" font-size="10">{_fmt(yr[1])}</text>',
    ]


def line_svg(xs: Sequence[float], ys: Sequence[float], title: str, xlabel: str, ylabel: str) -> str:
    if not xs:
        raise ValueError("nothing to plot")
    sx, x0, x1 = _scale(xs, PAD, W - PAD)
    sy, y0, y1 = _scale(ys, H - PAD, PAD)
    pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
    out = _frame(title, xlabel, ylabel, (x0, x1), (y0, y1))
    out.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>')
    out += [f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="3" fill="steelblue"/>' for x, y in zip(xs, ys)]
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter_svg(truth: Sequence[float], pred: Sequence[float], title: str) -> str:
    if not truth:
        raise ValueError("nothing to plot")
    both = list(truth) + list(pred)
    sx, lo, hi = _scale(both, PAD, W - PAD)
    sy, _, _ = _scale(both, H - PAD, PAD)
    out = _frame(title, "ground truth", "prediction", (lo, hi), (lo, hi))
    out.append(f'<line x1="{_fmt(sx(lo))}" y1="{_fmt(sy(lo))}" x2="{_fmt(sx(hi))}" y2="{_fmt(sy(hi))}" '
               f'stroke="grey" stroke-dasharray="4 3"/>')
    out += [f'<circle cx="{_fmt(sx(t))}" cy="{_fmt(sy(p))}" r="3" fill="darkorange"/>' for t, p in zip(truth, pred)]
    out.append("</svg>")
    return "\n".join(out) + "\n"


def leaderboard_csv(entries: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "key", "count", "mean_error"])
    for i, e in enumerate(entries, 1):
        w.writerow([i, e["key"], e["count"], repr(float(e["mean_error"]))])
    return buf.getvalue()


def finalists_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "key", "rmse", "mae", "seeds", "best"])
    for r in report["finalists"]:
        w.writerow([r["rank"], r["key"], repr(r["rmse"]), repr(r["mae"]), " ".join(map(str, r["seeds"])),
                    int(r["best"])])
    return buf.getvalue()


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "kind", "best_key", "val_error"])
    for r in rows:
        w.writerow([r["seed"], r["kind"], r["key"], repr(float(r["val_error"]))])
    return buf.getvalue()


def write_report(run_dir) -> list[Path]:
    """Write every table and plot the run directory has data for; returns the written paths."""
    run_dir = Path(run_dir)
    written = []

    def put(name: str, text: str):
        p = run_dir / name
        p.write_text(text)
        written.append(p)

    lb = run_dir / "leaderboard.json"
    if not lb.exists():
        raise FileNotFoundError(f"{lb} not found; run a search first")
    put("leaderboard.csv", leaderboard_csv(json.loads(lb.read_text())))
    metrics = read_metrics(run_dir / "metrics.csv")
    put("learning_curve.svg", line_svg([m["t"] for m in metrics], [m["mean_val_error"] for m in metrics],
                                       "controller learning curve", "timestep", "mean validation error"))
    rep = run_dir / "report.json"
    if rep.exists():
        report = json.loads(rep.read_text())
        put("finalists.csv", finalists_csv(report))
        best = next(r for r in report["finalists"] if r["best"])
        preds = best["per_seed"][0].get("predictions")
        if preds:
            put("predictions.svg", scatter_svg(report["test_labels"], preds, f"test predictions, {best['key']}"))
    abl = run_dir / "ablation.json"
    if abl.exists():
        put("ablation.csv", ablation_csv(json.loads(abl.read_text())))
    return written
