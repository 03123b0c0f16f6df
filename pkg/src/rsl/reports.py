"""Report emitters: per-configuration aggregation tables, per-run global-mean
timeseries, temporal-mean difference maps, and an optional dependency-free SVG
scatter of the aggregated scores.

summary.csv schema (stable, golden-tested):
    config,arch,variable_set,kp,m_steps,layers,dim,score_mean,score_std,
    finite_count,n_seeds,per_seed
one row per configuration (all grid axes except the seed), sorted by the
tuple (arch, variable_set, kp, m_steps, layers, dim). per_seed holds
"seed=score" pairs joined by "|", with inf for non-finite rollouts.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .data import DatasetStore, parse_timestamp
from .errors import ConfigError
from .evaluate import _reference_stats, aggregate_seeds

SUMMARY_COLUMNS = ("config", "arch", "variable_set", "kp", "m_steps", "layers",
                   "dim", "score_mean", "score_std", "finite_count", "n_seeds",
                   "per_seed")


def _fmt(x) -> str:
    if x is None:
        return "nan"
    if isinstance(x, float):
        if math.isinf(x):
            return "inf"
        return f"{x:.9g}"
    return str(x)


def _group_key(cfg: dict) -> tuple:
    m = cfg["model"]
    return (m["arch"], cfg["variable_set"], m["n_prognostic"], cfg["m_steps"],
            m["n_layers"], m["hidden_dim"])


def collect_summary(sweep_root) -> list[dict]:
    """One row per configuration, aggregating score.json over seeds."""
    sweep_root = Path(sweep_root)
    manifest_path = sweep_root / "sweep.json"
    if not manifest_path.exists():
        raise ConfigError(f"no sweep.json under {sweep_root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if not manifest.get("runs"):
        raise ConfigError("sweep manifest lists no runs")
    groups: dict[tuple, list] = {}
    for entry in manifest["runs"]:
        cfg = entry["config"]
        key = _group_key(cfg)
        score_path = sweep_root / entry["id"] / "score.json"
        score = float("inf")
        if score_path.exists():
            with open(score_path) as f:
                sj = json.load(f)
            agg = sj["scores"]["mean"]["aggregate"]
            score = float("inf") if agg == "inf" else float(agg)
        elif entry.get("status") == "failed":
            score = float("inf")
        else:
            continue   # not rolled out yet; leave out of the table
        groups.setdefault(key, []).append((cfg["seed"], score, entry["id"]))
    rows = []
    for key in sorted(groups):
        items = sorted(groups[key])
        agg = aggregate_seeds([s for _, s, _ in items], [sd for sd, _, _ in items])
        arch, vs, kp, m, layers, dim = key
        rows.append({
            "config": f"{arch}-{vs}-m{m}-l{layers}-d{dim}",
            "arch": arch, "variable_set": vs, "kp": kp, "m_steps": m,
            "layers": layers, "dim": dim,
            "score_mean": agg["mean"], "score_std": agg["std"],
            "finite_count": agg["finite_count"], "n_seeds": agg["n_seeds"],
            "per_seed": "|".join(f"{sd}={_fmt(s)}" for sd, s, _ in items),
            "_runs": [rid for _, _, rid in items],
        })
    return rows


def write_summary_csv(rows: list[dict], path) -> None:
    with open(path, "w") as f:
        f.write(",".join(SUMMARY_COLUMNS) + "\n")
        for r in rows:
            f.write(",".join(_fmt(r[c]) for c in SUMMARY_COLUMNS) + "\n")


def write_timeseries(sweep_root, run_id: str, out_dir) -> Path | None:
    """Copy the per-step area-weighted global means of a run's rollout."""
    src = Path(sweep_root) / run_id / "rollout" / "timeseries.csv"
    if not src.exists():
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dst = out_dir / f"{run_id}.csv"
    dst.write_bytes(src.read_bytes())
    return dst


def write_difference_maps(sweep_root, run_id: str, reference: DatasetStore,
                          out_dir) -> list[Path]:
    """Per-variable CSV maps of rollout temporal mean minus reference mean."""
    run_dir = Path(sweep_root) / run_id / "rollout"
    meta_path = run_dir / "meta.json"
    if not meta_path.exists():
        return []
    with open(meta_path) as f:
        meta = json.load(f)
    variables = meta["variables"]
    hh = meta["grid"]["n_lat"]
    ww = meta["grid"]["n_lon"]
    means = np.fromfile(run_dir / "means.bin", dtype="<f8").reshape(
        (len(variables), hh, ww))
    t0 = parse_timestamp(meta["start_time"])
    ref_mean, _ = _reference_stats(reference, variables, t0, meta["steps"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, var in enumerate(variables):
        path = out_dir / f"{run_id}_{var}.csv"
        np.savetxt(path, means[k] - ref_mean[k], delimiter=",", fmt="%.9g")
        written.append(path)
    return written


def write_scatter_svg(rows: list[dict], path, y_cut: float = 0.5) -> None:
    """Minimal scatter: dots = per-config mean, bars = std, crosses = seeds."""
    width, height = 80 + 90 * max(len(rows), 1), 360
    px0, py0, ph = 60, 20, 300
    finite_scores = []
    for r in rows:
        for part in r["per_seed"].split("|"):
            v = part.split("=")[1]
            if v not in ("inf", "nan"):
                finite_scores.append(float(v))
    ymax = min(max(finite_scores + [0.1]) * 1.15, y_cut)

    def ypix(v):
        return py0 + ph * (1.0 - min(v, ymax) / ymax)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py0 + ph}" stroke="black"/>',
             f'<line x1="{px0}" y1="{py0 + ph}" x2="{width - 20}" y2="{py0 + ph}" stroke="black"/>']
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = frac * ymax
        parts.append(f'<text x="4" y="{ypix(v) + 4}" font-size="10">{v:.3g}</text>')
    for i, r in enumerate(rows):
        x = px0 + 45 + 90 * i
        shown = 0
        for part in r["per_seed"].split("|"):
            v = part.split("=")[1]
            if v in ("inf", "nan"):
                continue
            val = float(v)
            if val <= ymax:
                shown += 1
                y = ypix(val)
                parts.append(f'<path d="M{x - 9} {y - 4} l8 8 m0 -8 l-8 8" '
                             f'stroke="gray" fill="none"/>')
        if r["score_mean"] is not None and r["score_mean"] <= ymax:
            y = ypix(r["score_mean"])
            sd = r["score_std"] or 0.0
            parts.append(f'<line x1="{x + 8}" y1="{ypix(r["score_mean"] + sd)}" '
                         f'x2="{x + 8}" y2="{ypix(max(r["score_mean"] - sd, 0.0))}" '
                         f'stroke="black"/>')
            parts.append(f'<circle cx="{x + 8}" cy="{y}" r="4" fill="black"/>')
        parts.append(f'<text x="{x - 30}" y="{py0 + ph + 14}" font-size="9">'
                     f'{r["config"]}</text>')
        parts.append(f'<text x="{x - 10}" y="{py0 + ph + 28}" font-size="9">'
                     f'{shown}/{r["n_seeds"]}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def write_report(sweep_root, out_dir, reference: DatasetStore | None = None,
                 svg: bool = False) -> dict:
    """Emit summary.csv plus per-run timeseries (and maps when a reference
    store is given) under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = collect_summary(sweep_root)
    write_summary_csv(rows, out_dir / "summary.csv")
    n_ts = n_maps = 0
    for r in rows:
        for rid in r["_runs"]:
            if write_timeseries(sweep_root, rid, out_dir / "timeseries"):
                n_ts += 1
            if reference is not None:
                n_maps += len(write_difference_maps(
                    sweep_root, rid, reference, out_dir / "maps"))
    if svg:
        write_scatter_svg(rows, out_dir / "scores.svg")
    return {"configs": len(rows), "timeseries": n_ts, "maps": n_maps}
