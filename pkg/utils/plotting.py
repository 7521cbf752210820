"""
SVG Plots

Decision-boundary plots with interpolation traces, schedule curves and sweep
curves. Output is deterministic: fixed hash salt, no date metadata, no path
simplification.

Boundary viewport transform: the axes fill the whole figure, so a data point
(u, v) inside the view box [x0, x1] x [y0, y1] lands at SVG coordinates

    px = (u - x0) / (x1 - x0) * W
    py = (y1 - v) / (y1 - y0) * H

where W = H = ``size_inches`` * 72 points.
"""

import io
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from utils.artifacts import write_text_atomic  # noqa: E402
from utils.model import Model, forward  # noqa: E402

logger = logging.getLogger(__name__)

SVG_DPI = 72
DEFAULT_VIEW = (0.0, 1.0, 0.0, 1.0)
CLASS_COLORS = ["#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860", "#DA8BC3", "#8C8C8C", "#CCB974", "#64B5CD"]

matplotlib.rcParams.update({
    "svg.hashsalt": "marginforge",
    "svg.fonttype": "path",
    "path.simplify": False,
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 9,
})


def viewport_transform(points: np.ndarray, view: Tuple[float, float, float, float] = DEFAULT_VIEW, size_inches: float = 5.0) -> np.ndarray:
    """Map data coordinates to SVG user units for a boundary plot (see module docstring)."""
    x0, x1, y0, y1 = view
    extent = size_inches * SVG_DPI
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    px = (points[:, 0] - x0) / (x1 - x0) * extent
    py = (y1 - points[:, 1]) / (y1 - y0) * extent
    return np.stack([px, py], axis=1)


def _figure_to_svg(fig) -> str:
    buffer = io.StringIO()
    fig.savefig(buffer, format="svg", dpi=SVG_DPI, metadata={"Date": None})
    plt.close(fig)
    return buffer.getvalue()


def emit_boundary_svg(
    model: Model,
    points: np.ndarray,
    labels: Optional[np.ndarray] = None,
    overlay: Optional[Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]]] = None,
    resolution: int = 100,
    view: Tuple[float, float, float, float] = DEFAULT_VIEW,
    size_inches: float = 5.0,
) -> str:
    """
    Render class regions, data points and optional x -> x_adv -> x_pgd traces.

    The class map comes from a single forward pass over a resolution x
    resolution grid of cell centers. Trace i is drawn as one polyline with SVG
    id "trace-i" through (x, x_adv, x_pgd).

    Args:
        model: Classifier with input dimension 2
        points: (N, 2) data points
        labels: Optional (N,) classes used to color the points
        overlay: Optional list of (x, x_adv, x_pgd) coordinate triples
        resolution: Grid cells per axis
        view: (x0, x1, y0, y1) view box in data coordinates
        size_inches: Width and height of the square figure

    Returns:
        str: SVG document

    Raises:
        ValueError: If the model or the points are not two-dimensional
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if model.input_dim != 2 or points.shape[1] != 2:
        raise ValueError(f"Boundary plots need 2-D inputs, got model width {model.input_dim} and points {list(points.shape)}")
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")

    x0, x1, y0, y1 = view
    xs = x0 + (np.arange(resolution) + 0.5) * (x1 - x0) / resolution
    ys = y0 + (np.arange(resolution) + 0.5) * (y1 - y0) / resolution
    grid_x, grid_y = np.meshgrid(xs, ys)
    grid = np.stack([grid_x.ravel(), grid_y.ravel()], axis=1)
    classes = np.argmax(forward(model.detached(), grid).data, axis=1).reshape(resolution, resolution)

    fig = plt.figure(figsize=(size_inches, size_inches), dpi=SVG_DPI)
    ax = fig.add_axes([0.0, 0.0, 1.0, 1.0])
    ax.set_axis_off()
    palette = ListedColormap(CLASS_COLORS[: model.num_classes])
    ax.imshow(
        classes, origin="lower", extent=view, cmap=palette, vmin=0, vmax=max(model.num_classes - 1, 1),
        alpha=0.25, interpolation="nearest", aspect="auto",
    )

    colors = [CLASS_COLORS[c % len(CLASS_COLORS)] for c in labels] if labels is not None else "#333333"
    scatter = ax.scatter(points[:, 0], points[:, 1], s=6, c=colors, linewidths=0)
    scatter.set_gid("points")

    for index, (x, x_adv, x_pgd) in enumerate(overlay or []):
        path = np.stack([x, x_adv, x_pgd])
        (line,) = ax.plot(path[:, 0], path[:, 1], color="black", linewidth=0.8)
        line.set_gid(f"trace-{index}")
        line.set_snap(False)

    ax.set_xlim(x0, x1)
    ax.set_ylim(y0, y1)
    return _figure_to_svg(fig)


def plot_schedule(table: pd.DataFrame, title: str) -> str:
    """eps_max (and rho when present) against epoch."""
    fig, ax = plt.subplots(figsize=(6, 4), dpi=SVG_DPI)
    ax.plot(table["epoch"], table["eps_max"], label="eps_max", color=CLASS_COLORS[0])
    ax.set_xlabel("epoch")
    ax.set_ylabel("eps_max")
    ax.set_title(title)
    if "rho" in table:
        twin = ax.twinx()
        twin.step(table["epoch"], table["rho"], where="post", label="rho", color=CLASS_COLORS[1])
        twin.set_ylabel("rho")
    fig.tight_layout()
    return _figure_to_svg(fig)


def plot_sweep(table: pd.DataFrame, parameter: str) -> str:
    """Natural and robust accuracy against the swept value."""
    fig, ax = plt.subplots(figsize=(6, 4), dpi=SVG_DPI)
    for column, color in zip([c for c in table.columns if c.endswith("_acc")], CLASS_COLORS):
        ax.plot(table[parameter], table[column], marker="o", label=column, color=color)
    ax.set_xlabel(parameter)
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    return _figure_to_svg(fig)


def save_svg(document: str, path: Union[str, Path]) -> Path:
    target = write_text_atomic(path, document)
    logger.info(f"🖼️ Wrote {target}")
    return target
