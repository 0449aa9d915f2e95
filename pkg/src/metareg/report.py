"""Per-pair evaluation and the comparison report: delimited metrics plus boxplot figures."""

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .losses import dice, tre
from .meta import classical_register, test_time_optimize
from .transforms import DisplacementField, warp_mask

METHODS = ("classical", "conventional", "meta", "meta_tto")
CSV_COLUMNS = ("method", "pair_id", "dsc", "tre_mm", "wall_time_s")


@dataclass
class MetricsRecord:
    method: str
    pair_id: int
    dsc: float
    tre_mm: float
    wall_time_s: float


def pair_seed(global_seed: int, pair_id: int) -> int:
    return int(np.random.SeedSequence([global_seed, pair_id]).generate_state(1)[0])


def _register(method, pair, cfg: RunConfig, nets):
    """Run one method on one pair; returns (ddf, wall seconds around the call only)."""
    mov, fix = pair.moving.image, pair.fixed.image
    if method == "classical":
        t0 = time.perf_counter()
        res = classical_register(
            pair,
            iterations=cfg.classical.iterations,
            lr=cfg.classical.lr,
            weights=cfg.meta.episode.loss_weights,
        )
        return res.ddf, time.perf_counter() - t0
    if method in ("conventional", "meta"):
        net = nets[method]
        t0 = time.perf_counter()
        vectors = net.predict_ddf(mov.grid, fix.grid)
        return DisplacementField(vectors), time.perf_counter() - t0
    if method == "meta_tto":
        net = nets["meta"]
        pid = getattr(pair, "pair_id", 0)
        t0 = time.perf_counter()
        res = test_time_optimize(net, pair, cfg.tto, seed=pair_seed(cfg.seed, pid))
        return res.ddf, time.perf_counter() - t0
    raise ValueError(f"unknown method {method!r}")


def evaluate_pairs(test_pairs, methods, cfg: RunConfig, nets=None):
    """MetricsRecords for every (method, pair); learned methods need their networks.

    A method whose network is missing is reported as an error while the other
    methods still run.
    """
    nets = nets or {}
    records = []
    errors = {}
    for method in methods:
        if method not in METHODS:
            errors[method] = f"unknown method {method!r}"
            continue
        if method in ("conventional", "meta") and method not in nets:
            errors[method] = f"no checkpoint provided for method {method!r}"
            continue
        if method == "meta_tto" and "meta" not in nets:
            errors[method] = "meta_tto needs the meta checkpoint"
            continue
        for pid, pair in enumerate(test_pairs):
            pair.pair_id = pid
            ddf, seconds = _register(method, pair, cfg, nets)
            warped = warp_mask(pair.moving.gland_mask, ddf)
            d = dice(warped, pair.fixed.gland_mask)
            t = tre(
                pair.moving.landmarks,
                pair.fixed.landmarks,
                ddf,
                pair.moving.image.spacing,
            )
            records.append(MetricsRecord(method, pid, d, t.tre_mm, seconds))
    return records, errors


def write_metrics_csv(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.method, r.pair_id, repr(r.dsc), repr(r.tre_mm), repr(r.wall_time_s)])


def read_metrics_csv(path):
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics columns {reader.fieldnames}")
        for row in reader:
            records.append(
                MetricsRecord(
                    row["method"],
                    int(row["pair_id"]),
                    float(row["dsc"]),
                    float(row["tre_mm"]),
                    float(row["wall_time_s"]),
                )
            )
    return records


def summarize(records):
    """Per-method mean and sample (n-1) standard deviation of DSC/TRE, mean wall time."""
    summary = {}
    for method in METHODS:
        rows = [r for r in records if r.method == method]
        if not rows:
            continue
        dscs = np.array([r.dsc for r in rows], dtype=np.float64)
        tres = np.array([r.tre_mm for r in rows], dtype=np.float64)
        times = np.array([r.wall_time_s for r in rows], dtype=np.float64)
        summary[method] = {
            "n": len(rows),
            "dsc_mean": float(dscs.mean()),
            "dsc_std": float(dscs.std(ddof=1)) if len(rows) > 1 else 0.0,
            "tre_mean": float(tres.mean()),
            "tre_std": float(tres.std(ddof=1)) if len(rows) > 1 else 0.0,
            "time_mean": float(times.mean()),
        }
    return summary


def write_summary_csv(summary, path):
    cols = ("method", "n", "dsc_mean", "dsc_std", "tre_mean", "tre_std", "time_mean")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for method, s in summary.items():
            w.writerow([method, s["n"]] + [repr(s[c]) for c in cols[2:]])


def render_boxplots(records, out_dir):
    """Boxplots of per-pair DSC and TRE by method, whiskers at the 10th/90th percentiles."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    present = [m for m in METHODS if any(r.method == m for r in records)]
    if not present:
        return []
    written = []
    for metric, attr, label in (("dsc", "dsc", "DSC"), ("tre", "tre_mm", "TRE (mm)")):
        fig, ax = plt.subplots(figsize=(6, 4))
        series = [[getattr(r, attr) for r in records if r.method == m] for m in present]
        ax.boxplot(series, tick_labels=present, whis=(10, 90))
        ax.set_ylabel(label)
        ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{metric}_boxplot.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def write_report(records, errors, cfg: RunConfig, out_dir, figures=True):
    """Emit metrics.csv, summary.csv, the resolved config, and the figures."""
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(records, os.path.join(out_dir, "metrics.csv"))
    summary = summarize(records)
    write_summary_csv(summary, os.path.join(out_dir, "summary.csv"))
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        f.write(cfg.to_json() + "\n")
    if errors:
        with open(os.path.join(out_dir, "errors.txt"), "w") as f:
            for method, msg in errors.items():
                f.write(f"{method}: {msg}\n")
    if figures:
        render_boxplots(records, out_dir)
    return summary
