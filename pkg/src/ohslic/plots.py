"""File-output figure rendering for runs and benchmark reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# Fixed value ranges per pigment so images are comparable across runs.
PIGMENT_RANGES = {"ab": (0.0, 50.0), "ar": (0.0, 14.0), "ant": (0.0, 5.0)}
PIGMENT_TITLES = {
    "ab": "chlorophyll a+b (ug/cm2)",
    "ar": "carotenoid (ug/cm2)",
    "ant": "anthocyanin (ug/cm2)",
}


def save_pigment_heatmaps(outputs: np.ndarray, out_dir, prefix: str = "pigment") -> list[str]:
    """One heat map per regression channel with its fixed color ramp."""
    paths = []
    for j, key in enumerate(("ab", "ar", "ant")):
        vmin, vmax = PIGMENT_RANGES[key]
        fig, ax = plt.subplots(figsize=(6, 5))
        im = ax.imshow(outputs[:, :, j], vmin=vmin, vmax=vmax, cmap="viridis")
        ax.set_title(PIGMENT_TITLES[key])
        ax.set_xlabel("column")
        ax.set_ylabel("line")
        fig.colorbar(im, ax=ax, shrink=0.85)
        path = str(out_dir / f"{prefix}_{key}.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


def save_rgb_png(rgb: np.ndarray, path) -> None:
    plt.imsave(str(path), rgb)


def save_time_vs_k(sweep: list[dict], path) -> None:
    ks = [s["k"] for s in sweep]
    means = [s["mean_ms"] for s in sweep]
    stds = [s["std_ms"] for s in sweep]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(ks, means, yerr=stds, marker="o")
    ax.set_xlabel("clusters")
    ax.set_ylabel("line time (ms)")
    ax.set_title("Per-line processing time vs cluster count")
    ax.grid(alpha=0.3)
    fig.savefig(str(path), dpi=120, bbox_inches="tight")
    plt.close(fig)


def save_quality_vs_k(sweep: list[dict], path) -> None:
    ks = [s["k"] for s in sweep]
    r2s = [s["r2_mean"] for s in sweep]
    dices = [s["dice_background"] for s in sweep]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, r2s, marker="o", label="mean R2")
    ax.set_xlabel("clusters")
    ax.set_ylabel("mean R2")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(ks, dices, marker="s", color="tab:orange", label="background Dice")
    ax2.set_ylabel("background Dice")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="lower center")
    ax.set_title("Quality vs cluster count")
    fig.savefig(str(path), dpi=120, bbox_inches="tight")
    plt.close(fig)


def save_controller_trace(history, t_lo: float, t_hi: float, path) -> None:
    if not history:
        return
    lines, times, ks = zip(*history)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(lines, times, lw=0.8, label="line time (ms)")
    ax.axhspan(t_lo, t_hi, color="tab:green", alpha=0.15, label="target band")
    ax.set_xlabel("line")
    ax.set_ylabel("ms")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(lines, ks, color="tab:red", lw=0.8, label="cluster target")
    ax2.set_ylabel("clusters")
    handles, labels = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(handles + h2, labels + l2, loc="upper right", fontsize=8)
    ax.set_title("Adaptive cluster control")
    fig.savefig(str(path), dpi=120, bbox_inches="tight")
    plt.close(fig)
