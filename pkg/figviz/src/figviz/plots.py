"""Figure rendering with a pinned style: same bundle in, same pixels out."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Rectangle

from .bundle import Bundle, BundleError, display_label

PINNED_STYLE = {
    "figure.figsize": (6.4, 4.8),
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.family": "DejaVu Sans",
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.6,
}

SERIES_COLORS = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd",
    "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
]


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    bundle_path: str
    out_path: str
    series: tuple = ()

    def __post_init__(self):
        if self.kind not in ("curves", "pareto", "logit_heatmap", "adjacency_heatmap"):
            raise ValueError(f"unknown figure kind: {self.kind}")


@dataclass(frozen=True)
class RenderResult:
    path: Path
    grid_shape: tuple | None = None


def _select_runs(bundle: Bundle, runs) -> list[str]:
    labels = list(runs) if runs else bundle.run_labels
    if not labels:
        raise BundleError("bundle contains no runs")
    return labels


def _save(fig, out_path) -> Path:
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, metadata={"Software": "figviz"} if out.suffix == ".png" else None)
    plt.close(fig)
    return out


def plot_curves(bundle: Bundle, metrics, out_path, runs=None) -> RenderResult:
    """Training curves: one line per (run, metric), step on the x axis."""
    if not metrics:
        raise ValueError("no metric names given")
    labels = _select_runs(bundle, runs)
    with plt.rc_context(PINNED_STYLE):
        fig, ax = plt.subplots()
        color_idx = 0
        for label in labels:
            data = bundle.metrics(label)
            legend_base = display_label(bundle.manifest(label), label)
            for metric in metrics:
                if metric not in data:
                    raise BundleError(f"metrics for run '{label}' have no column '{metric}'")
                name = legend_base if len(metrics) == 1 else f"{legend_base}: {metric}"
                ax.plot(data["step"], data[metric],
                        color=SERIES_COLORS[color_idx % len(SERIES_COLORS)], label=name)
                color_idx += 1
        ax.set_xlabel("step")
        ax.set_ylabel(", ".join(metrics))
        ax.legend(loc="best", fontsize=8)
        return RenderResult(path=_save(fig, out_path))


def plot_pareto(bundle: Bundle, out_path, runs=None,
                x_metric: str = "train_acc", y_metric: str = "diversity") -> RenderResult:
    """Diversity-accuracy frontier: each run's eval points as a connected
    scatter, final point emphasized."""
    labels = _select_runs(bundle, runs)
    with plt.rc_context(PINNED_STYLE):
        fig, ax = plt.subplots()
        for idx, label in enumerate(labels):
            data = bundle.metrics(label)
            for metric in (x_metric, y_metric):
                if metric not in data:
                    raise BundleError(f"metrics for run '{label}' have no column '{metric}'")
            color = SERIES_COLORS[idx % len(SERIES_COLORS)]
            ax.plot(data[x_metric], data[y_metric], marker="o", markersize=3,
                    alpha=0.7, color=color,
                    label=display_label(bundle.manifest(label), label))
            ax.plot(data[x_metric][-1], data[y_metric][-1], marker="*",
                    markersize=12, color=color)
        ax.set_xlabel(x_metric)
        ax.set_ylabel(y_metric)
        ax.legend(loc="best", fontsize=8)
        return RenderResult(path=_save(fig, out_path))


def _heatmap_axes(ax, matrix: np.ndarray, mask: np.ndarray | None):
    ax.imshow(matrix, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    if mask is not None:
        for r, c in np.argwhere(mask):
            ax.add_patch(Rectangle((c - 0.5, r - 0.5), 1.0, 1.0,
                                   fill=False, edgecolor="#00a000", linewidth=1.4))


def plot_logit_heatmap(bundle: Bundle, snapshot: str, out_path, run=None) -> RenderResult:
    """Per-target normalized logit rows with the feasible cells framed."""
    labels = _select_runs(bundle, [run] if run else None)
    label = labels[0]
    data = bundle.heatmap(label, snapshot)
    matrix = np.asarray(data["matrix"], dtype=float)
    mask = np.asarray(data["feasible"], dtype=bool)
    if mask.shape != matrix.shape:
        raise BundleError(
            f"feasibility mask shape {mask.shape} does not match matrix shape {matrix.shape}")
    with plt.rc_context(PINNED_STYLE):
        fig, ax = plt.subplots()
        _heatmap_axes(ax, matrix, mask)
        ax.set_xlabel(f"next node (current = {data.get('current', '?')})")
        ax.set_ylabel("target")
        ax.set_yticks(range(len(data.get("targets", []))))
        ax.set_yticklabels(data.get("targets", []), fontsize=6)
        ax.grid(False)
        return RenderResult(path=_save(fig, out_path), grid_shape=matrix.shape)


def plot_adjacency_heatmap(bundle: Bundle, out_path, run=None,
                           panel: str = "scores") -> RenderResult:
    """Learned edge scores (or corpus edge frequencies) with true edges
    framed."""
    labels = _select_runs(bundle, [run] if run else None)
    label = labels[0]
    data = bundle.heatmap(label, "adjacency_final")
    if panel not in ("scores", "frequency"):
        raise ValueError(f"unknown panel: {panel}")
    key = "scores" if panel == "scores" else "edge_frequency"
    if key not in data:
        raise BundleError(f"adjacency heatmap for run '{label}' has no '{key}' panel")
    matrix = np.asarray(data[key], dtype=float)
    adjacency = np.asarray(data["adjacency"], dtype=bool)
    if adjacency.shape != matrix.shape:
        raise BundleError(
            f"adjacency mask shape {adjacency.shape} does not match matrix shape {matrix.shape}")
    lo, hi = float(matrix.min()), float(matrix.max())
    normalized = np.full_like(matrix, 0.5) if hi - lo == 0 else (matrix - lo) / (hi - lo)
    with plt.rc_context(PINNED_STYLE):
        fig, ax = plt.subplots()
        _heatmap_axes(ax, normalized, adjacency)
        ax.set_xlabel("next node")
        ax.set_ylabel("current node")
        ax.grid(False)
        return RenderResult(path=_save(fig, out_path), grid_shape=matrix.shape)


def render(spec: FigureSpec, bundle: Bundle, **kwargs) -> RenderResult:
    if spec.kind == "curves":
        return plot_curves(bundle, list(spec.series) or ["train_acc"], spec.out_path, **kwargs)
    if spec.kind == "pareto":
        return plot_pareto(bundle, spec.out_path, **kwargs)
    if spec.kind == "logit_heatmap":
        snapshot = spec.series[0] if spec.series else "logits_final"
        return plot_logit_heatmap(bundle, snapshot, spec.out_path, **kwargs)
    return plot_adjacency_heatmap(bundle, spec.out_path, **kwargs)
