"""Delimited metrics output and the matplotlib figures rendered beside it."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

METRIC_COLUMNS = [
    "sim",
    "p",
    "n",
    "T",
    "dim",
    "n_reps",
    "n_matched",
    "similarity_mean",
    "similarity_se",
    "aie_bias",
    "aie_mse",
]


def save_metrics_csv(rows: Sequence[dict], path: str | Path) -> Path:
    """Write replication metrics rows with a stable column order."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRIC_COLUMNS})
    return path


def render_replication_figures(rows: Sequence[dict], outdir: str | Path) -> list[Path]:
    """Similarity / bias / MSE figures for a replication study.

    With several T values the metrics are drawn as trends over T (one line
    per planted dim); with a single cell they become per-dim bars.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    dims = sorted({row["dim"] for row in rows})
    t_values = sorted({row["T"] for row in rows})
    metrics = [
        ("similarity_mean", "similarity to planted direction", "similarity"),
        ("aie_bias", "indirect-effect bias", "aie_bias"),
        ("aie_mse", "indirect-effect MSE", "aie_mse"),
    ]
    paths = []
    for key, label, stem in metrics:
        fig, ax = plt.subplots(figsize=(5, 3.4))
        if len(t_values) > 1:
            for dim in dims:
                series = [
                    next(r[key] for r in rows if r["dim"] == dim and r["T"] == t)
                    for t in t_values
                ]
                ax.plot(t_values, series, marker="o", label=dim)
            ax.set_xlabel("observations per unit (T)")
        else:
            values = [next(r[key] for r in rows if r["dim"] == dim) for dim in dims]
            ax.bar(dims, values)
        ax.set_ylabel(label)
        if len(t_values) > 1:
            ax.legend(frameon=False)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        out = outdir / f"{stem}.png"
        fig.savefig(out, dpi=150)
        plt.close(fig)
        paths.append(out)
    return paths


def render_fit_figures(
    dfd_trace: Sequence[float],
    thetas: Sequence[Sequence[float]],
    dfd_threshold: float,
    outdir: str | Path,
) -> list[Path]:
    """Selection trace and loading profiles for a fitted study."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(5, 3.4))
    ks = range(1, len(dfd_trace) + 1)
    ax.plot(ks, dfd_trace, marker="o")
    ax.axhline(dfd_threshold, color="crimson", linestyle="--", linewidth=1)
    ax.set_xlabel("number of components k")
    ax.set_ylabel("deviation from diagonality")
    ax.set_xticks(list(ks))
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = outdir / "dfd_trace.png"
    fig.savefig(out, dpi=150)
    plt.close(fig)
    paths.append(out)

    if thetas:
        k = len(thetas)
        fig, axes = plt.subplots(k, 1, figsize=(6, 1.8 * k), sharex=True, squeeze=False)
        for j, theta in enumerate(thetas):
            ax = axes[j, 0]
            ax.bar(range(1, len(theta) + 1), theta, width=0.8)
            ax.axhline(0.0, color="black", linewidth=0.6)
            ax.set_ylabel(f"component {j + 1}")
        axes[-1, 0].set_xlabel("mediator coordinate")
        fig.tight_layout()
        out = outdir / "loadings.png"
        fig.savefig(out, dpi=150)
        plt.close(fig)
        paths.append(out)
    return paths
