"""Figure rendering for search reports and sweeps (written to files)."""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, outdir, name):
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def rank_distribution(report: dict, outdir, name="rank_distribution.png"):
    """Bar chart of the selected rank per layer."""
    layers = report["layers"]
    labels = [layer["name"] for layer in layers]
    ranks = [layer["selected_rank"] for layer in layers]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(layers) + 1.5), 3.2))
    ax.bar(range(len(ranks)), ranks, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("selected rank")
    ax.set_title(f"Selected ranks ({report['decomp'].upper()})")
    return _save(fig, outdir, name)


def loss_traces(report: dict, outdir, name="loss_traces.png"):
    """Rank loss (top) and total loss (bottom) across all search phases."""
    totals = report["phase_totals"]
    fig, (ax_r, ax_t) = plt.subplots(2, 1, figsize=(6, 4.6), sharex=True)
    offset = 0
    for phase in totals:
        span = np.arange(offset, offset + len(phase["loss_total"]))
        ax_r.plot(span, phase["loss_rank"], color="tab:orange")
        ax_t.plot(span, phase["loss_total"], color="tab:blue")
        offset = span[-1] + 1
        for ax in (ax_r, ax_t):
            ax.axvline(offset - 0.5, color="gray", lw=0.6, ls=":")
    ax_r.set_ylabel("rank loss")
    ax_t.set_ylabel("total loss")
    ax_t.set_xlabel("search iteration (phases concatenated)")
    return _save(fig, outdir, name)


def reduction_bars(per_layer, names, outdir, name="reductions.png"):
    """Per-layer params/FLOPs reduction percentages."""
    x = np.arange(len(per_layer))
    params = [row["params_reduction_pct"] for row in per_layer]
    flops = [row["flops_reduction_pct"] for row in per_layer]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(x) + 1.5), 3.2))
    ax.bar(x - 0.2, params, width=0.4, label="params")
    ax.bar(x + 0.2, flops, width=0.4, label="FLOPs")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("reduction (%)")
    ax.axhline(0.0, color="black", lw=0.6)
    ax.legend()
    return _save(fig, outdir, name)


def sweep_heatmap(rows, value_key, outdir, name=None):
    """gamma x beta heatmap of one column of the sweep summary."""
    gammas = sorted({row["gamma"] for row in rows})
    betas = sorted({row["beta"] for row in rows})
    grid = np.full((len(gammas), len(betas)), np.nan)
    for row in rows:
        grid[gammas.index(row["gamma"]), betas.index(row["beta"])] = row[value_key]
    fig, ax = plt.subplots(figsize=(1.1 * len(betas) + 2.2, 1.0 * len(gammas) + 1.8))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(betas)))
    ax.set_xticklabels([f"{b:g}" for b in betas])
    ax.set_yticks(range(len(gammas)))
    ax.set_yticklabels([f"{g:g}" for g in gammas])
    ax.set_xlabel("beta")
    ax.set_ylabel("gamma")
    ax.set_title(value_key)
    for i in range(len(gammas)):
        for j in range(len(betas)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center",
                        color="white", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.85)
    return _save(fig, outdir, name or f"heatmap_{value_key}.png")
