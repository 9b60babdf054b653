import logging
import os
from typing import Dict, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed ids inside the SVG so identical data gives identical files.
matplotlib.rcParams["svg.hashsalt"] = "workbench"

TYPE_COLORS = {
    "previous_token": "#3498db",
    "current_token": "#9b59b6",
    "induction": "#e74c3c",
    "multigram": "#2ecc71",
}
# Fallback ramp for heads without a behavioural label
layer_cmap = LinearSegmentedColormap.from_list("layers", ["#95a5a6", "#34495e"])


def get_type_color(type_label: Optional[str], layer: int = 0, n_layers: int = 2) -> str:
    """
    Returns a color for a head type, or a grey shade by layer when untyped.
    """
    if type_label in TYPE_COLORS:
        return TYPE_COLORS[type_label]
    value = layer / max(1, n_layers - 1)
    r, g, b, _ = layer_cmap(min(max(value, 0.0), 1.0))
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


def plot_trajectories(frame: pd.DataFrame, metric: str, source: str,
                      head_types: Optional[Dict[str, str]] = None, figsize: tuple = (8, 5)) -> plt.Figure:
    """
    Line plot of one metric on one source against training step, one line per target.

    Args:
        frame: Trajectory rows with step, target, source, metric and value columns.
        metric: Metric to plot.
        source: Data source to plot.
        head_types: Optional head id -> type label, used for line colors.

    Returns:
        The matplotlib Figure object.
    """
    head_types = head_types or {}
    fig, ax = plt.subplots(figsize=figsize)
    try:
        part = frame[(frame["metric"] == metric) & (frame["source"] == source)].dropna(subset=["value"])
        if part.empty:
            ax.text(0.5, 0.5, f"No {metric} data for source '{source}'",
                    ha="center", va="center", transform=ax.transAxes)
            return fig
        for target, rows in part.groupby("target", sort=True):
            rows = rows.sort_values("step")
            layer = int(target.split("_")[1]) if target.startswith("head_") else 0
            ax.plot(rows["step"].clip(lower=1), rows["value"], label=target,
                    color=get_type_color(head_types.get(target), layer), linewidth=1.2)
        ax.set_xscale("log")
        ax.set_xlabel("training step")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} on {source}")
        if part["target"].nunique() <= 12:
            ax.legend(fontsize=7, frameon=False)
        fig.tight_layout()
    except Exception as e:
        logger.error(f"Error plotting {metric} trajectories: {e}")
        ax.clear()
        ax.text(0.5, 0.5, f"Error plotting trajectories:\n{e}", ha="center", va="center", transform=ax.transAxes)
    return fig


def plot_loss_curve(curve: pd.DataFrame, figsize: tuple = (8, 4)) -> plt.Figure:
    """Training loss against step on a log step axis."""
    fig, ax = plt.subplots(figsize=figsize)
    if curve.empty:
        ax.text(0.5, 0.5, "Empty loss curve", ha="center", va="center", transform=ax.transAxes)
        return fig
    ax.plot(curve["step"], curve["train_loss"], color="#34495e", linewidth=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("training step")
    ax.set_ylabel("train loss")
    fig.tight_layout()
    return fig


def save_svg(fig: plt.Figure, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Wrote chart {path}")
    return path
