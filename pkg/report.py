import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from config import REGIONS
from errors import DatasetError
from synthface import load_png

logger = logging.getLogger(__name__)

# Eval outputs are laid out as <eval_dir>/metrics.csv plus, per record i,
# samples/<i>_source.png, _reference.png, _output.png and _attention.npy.

METRIC_COLUMNS = ["psnr", "ssim", "id_ssim", "l2_m", "style_error", "attn_iou"]


def sample_paths(eval_dir, index):
    base = Path(eval_dir) / "samples" / f"{index:03d}"
    return {
        "source": base.with_name(base.name + "_source.png"),
        "reference": base.with_name(base.name + "_reference.png"),
        "output": base.with_name(base.name + "_output.png"),
        "attention": base.with_name(base.name + "_attention.npy"),
    }


def load_metrics(eval_dir):
    path = Path(eval_dir) / "metrics.csv"
    if not path.exists():
        raise DatasetError(f"metrics not found: {path} (run eval first)")
    return pd.read_csv(path)


# ====== FIGURES ======

def transfer_grid(samples, path, title="Makeup transfer"):
    """
    One row per sample: source | reference | output | one attention map per region.
    Parameters:
        samples: list of dicts with source, reference, output (HxWx3) and attention (N, U, V)
    """
    if not samples:
        raise DatasetError("no samples to draw")
    n_regions = samples[0]["attention"].shape[0]
    cols = 3 + n_regions
    fig, axes = plt.subplots(len(samples), cols, figsize=(1.6 * cols, 1.6 * len(samples)), squeeze=False)
    headers = ["source", "reference", "output"] + [f"attn {r}" for r in REGIONS[:n_regions]]
    for i, sample in enumerate(samples):
        panels = [sample["source"], sample["reference"], sample["output"]] + list(sample["attention"])
        for j, panel in enumerate(panels):
            ax = axes[i, j]
            if j < 3:
                ax.imshow(np.clip(panel, 0.0, 1.0))
            else:
                ax.imshow(panel, cmap="viridis", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(headers[j], fontsize=8, fontweight="bold")
    fig.suptitle(title, fontsize=10, fontweight="bold")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curves(history, path, title="Training losses"):
    """Every loss column of a history frame against the step, plus a stats box."""
    frame = history if isinstance(history, pd.DataFrame) else pd.read_csv(history)
    losses = [c for c in frame.columns if c.startswith("loss")]
    fig = plt.figure(figsize=(10, 6))
    for column in losses:
        plt.plot(frame["step"], frame[column], linewidth=1.5, label=column)
    plt.xlabel("Step", fontsize=12, fontweight="bold")
    plt.ylabel("Loss", fontsize=12, fontweight="bold")
    plt.title(title, fontsize=14, fontweight="bold")
    plt.grid(True, alpha=0.3)
    plt.legend(fontsize=10)
    stats_text = "\n".join(
        [f"Steps: {len(frame)}"] + [f"{c}: {frame[c].iloc[0]:.4f} -> {frame[c].iloc[-1]:.4f}" for c in losses]
    )
    plt.text(0.98, 0.98, stats_text, transform=plt.gca().transAxes, ha="right", va="top",
             bbox=dict(boxstyle="round", facecolor="white", alpha=0.8), fontsize=9)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def metric_bars(frame, path):
    """Mean of each metric with its standard deviation."""
    columns = [c for c in METRIC_COLUMNS if c in frame.columns]
    values = frame[columns].replace(np.inf, np.nan)
    fig, axes = plt.subplots(1, len(columns), figsize=(2.2 * len(columns), 3), squeeze=False)
    for ax, column in zip(axes[0], columns):
        ax.bar([0], [values[column].mean()], yerr=[values[column].std(ddof=0)], color="tab:blue", alpha=0.8)
        ax.set_title(column, fontsize=9, fontweight="bold")
        ax.set_xticks([])
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ====== REPORT ======

def summary(frame):
    """Mean, std, min and max of every metric column."""
    columns = [c for c in frame.columns if c in METRIC_COLUMNS or c.startswith(("style_error_", "attn_iou_"))]
    return frame[columns].replace(np.inf, np.nan).agg(["mean", "std", "min", "max"]).T


def make_report(eval_dir, out_dir, history_files=()):
    """
    Write summary.csv, metrics.csv, the transfer grid and curves from an eval directory.
    Returns:
        dict of written paths
    """
    logger.info("=== REPORT ===")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame = load_metrics(eval_dir)
    written = {"metrics": out / "metrics.csv", "summary": out / "summary.csv"}
    frame.to_csv(written["metrics"], index=False)
    table = summary(frame)
    table.to_csv(written["summary"])

    samples = []
    for i in range(len(frame)):
        paths = sample_paths(eval_dir, i)
        if not all(p.exists() for p in paths.values()):
            raise DatasetError(f"eval sample {i} is incomplete in {Path(eval_dir) / 'samples'}")
        samples.append({
            "source": load_png(paths["source"]),
            "reference": load_png(paths["reference"]),
            "output": load_png(paths["output"]),
            "attention": np.load(paths["attention"]),
        })
    written["grid"] = transfer_grid(samples, out / "transfer_grid.png")
    written["metrics_plot"] = metric_bars(frame, out / "metrics.png")
    for history in history_files:
        history = Path(history)
        if not history.exists():
            logger.warning("History file not found, skipped: %s", history)
            continue
        key = f"curves_{history.parent.name or history.stem}"
        written[key] = training_curves(history, out / f"{key}.png", title=f"Training losses ({history.parent.name})")

    logger.info("=" * 50)
    logger.info("FINAL REPORT : %d records", len(frame))
    for name, row in table.iterrows():
        logger.info("  %-20s mean %.4f  std %.4f", name, row["mean"], row["std"])
    logger.info("=" * 50)
    return written
