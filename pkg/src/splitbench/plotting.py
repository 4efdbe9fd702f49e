"""Deterministic SVG figures from a results directory.

Bands are 95% normal-approximation intervals over seeds (mean +- 1.96 *
standard error); with one seed they collapse to the mean line.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import read_csv  # noqa: E402

FIGURES = ("time_vs_cut", "memory_vs_cut", "accuracy_bars", "accuracy_vs_cut", "resilience_vs_cut",
           "resilience_vs_frequency", "resilience_vs_noise")


def confidence_band(values) -> tuple[float, float, float]:
    """(mean, low, high) of a 95% interval; zero width for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    mean = float(v.mean())
    if v.size == 1:
        return mean, mean, mean
    half = 1.96 * float(v.std(ddof=1)) / np.sqrt(v.size)
    return mean, mean - half, mean + half


def _series(rows, key, x, y) -> dict:
    groups: dict = defaultdict(lambda: defaultdict(list))
    for r in rows:
        groups[key(r)][float(r[x])].append(float(r[y]))
    return {k: sorted((xv, confidence_band(ys)) for xv, ys in g.items()) for k, g in sorted(groups.items())}


def _line_plot(series: dict, xlabel: str, ylabel: str, title: str, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pts in series.items():
        xs = [p[0] for p in pts]
        mean = [p[1][0] for p in pts]
        ax.plot(xs, mean, marker="o", label=str(label))
        ax.fill_between(xs, [p[1][1] for p in pts], [p[1][2] for p in pts], alpha=0.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def _save(fig, path: Path) -> Path:
    with matplotlib.rc_context({"svg.hashsalt": "splitbench", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _final_rows(rows):
    last = defaultdict(int)
    for r in rows:
        last[r["cell"]] = max(last[r["cell"]], int(r["epoch"]))
    return [r for r in rows if int(r["epoch"]) == last[r["cell"]]]


def _seed_means(rows, keys, value):
    """Average over pairs within a cell, keep one value per (keys..., seed)."""
    acc = defaultdict(list)
    for r in rows:
        acc[tuple(r[k] for k in keys) + (r["seed"],)].append(float(r[value]))
    return [dict(zip(keys + ("seed",), k), **{value: np.mean(v)}) for k, v in acc.items()]


def plot(results_dir: str | Path, figure_kind: str, out_dir: str | Path | None = None) -> list[Path]:
    res = Path(results_dir)
    out = Path(out_dir) if out_dir else res / "figures"
    out.mkdir(parents=True, exist_ok=True)
    kinds = FIGURES if figure_kind == "all" else (figure_kind,)
    made = []
    for kind in kinds:
        if kind not in FIGURES:
            raise ValueError(f"unknown figure kind {kind!r}; choose from {FIGURES} or 'all'")
        path = out / f"{kind}.svg"
        if kind == "time_vs_cut":
            rows = read_csv(res / "timing.csv")
            _require(rows, kind)
            for r in rows:
                r["fb"] = float(r["client_fb"]) + float(r["server_fb"])
            made.append(_line_plot(_series(rows, lambda r: r["arch"], "cut_index", "fb"),
                                   "cut index", "F&B seconds per epoch", "F&B time vs cut", path))
        elif kind == "memory_vs_cut":
            rows = read_csv(res / "memory.csv")
            _require(rows, kind)
            for r in rows:
                r["client"] = int(r["client_weight_bytes"]) + int(r["client_activation_bytes"])
            series = _series(rows, lambda r: "client", "cut_index", "client")
            series.update(_series(rows, lambda r: "full model", "cut_index", "full_bytes"))
            made.append(_line_plot(series, "cut index", "bytes", "memory vs cut", path))
        elif kind in ("accuracy_bars", "accuracy_vs_cut"):
            rows = _seed_means(_final_rows(read_csv(res / "metrics.csv")), ("arch", "cut_index", "privacy"),
                               "test_acc")
            _require(rows, kind)
            if kind == "accuracy_vs_cut":
                made.append(_line_plot(_series(rows, lambda r: r["arch"], "cut_index", "test_acc"),
                                       "cut index", "test accuracy", "accuracy vs cut", path))
            else:
                made.append(_bar_plot(rows, path))
        else:
            rows = read_csv(res / "attack.csv") if (res / "attack.csv").exists() else []
            _require(rows, kind)
            x = {"resilience_vs_cut": "cut_index", "resilience_vs_frequency": "dc_frequency",
                 "resilience_vs_noise": "noise_multiplier"}[kind]
            made.append(_line_plot(_series(rows, lambda r: f'{r["arch"]} {r["mode"]}', x, "tau"),
                                   x.replace("_", " "), "attack resilience", kind.replace("_", " "), path))
    return made


def _require(rows, kind):
    if not rows:
        raise ValueError(f"no data for figure {kind!r}")


def _bar_plot(rows, path: Path) -> Path:
    groups = defaultdict(list)
    for r in rows:
        groups[(r["arch"], r["cut_index"], r["privacy"])].append(r["test_acc"])
    labels, means, errs = [], [], []
    for key in sorted(groups):
        m, lo, hi = confidence_band(groups[key])
        labels.append(f"{key[0]} d{key[1]} p{key[2]}")
        means.append(m)
        errs.append(hi - m)
    fig, ax = plt.subplots(figsize=(max(4, len(labels)), 4))
    ax.bar(range(len(labels)), means, yerr=errs, capsize=4)
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right")
    ax.set_ylabel("test accuracy")
    ax.set_title("final accuracy")
    fig.tight_layout()
    return _save(fig, path)
