"""Figure rendering for exported path-planning training-run bundles."""

__version__ = "0.1.0"

from .bundle import Bundle, BundleError, load_bundle
from .plots import (
    FigureSpec,
    RenderResult,
    plot_adjacency_heatmap,
    plot_curves,
    plot_logit_heatmap,
    plot_pareto,
    render,
)

__all__ = [
    "Bundle", "BundleError", "FigureSpec", "RenderResult", "load_bundle",
    "plot_adjacency_heatmap", "plot_curves", "plot_logit_heatmap",
    "plot_pareto", "render",
]
