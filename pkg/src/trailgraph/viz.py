"""Figure rendering for CLI reports: graph overlays and training curves.

All functions write PNG (or any matplotlib-supported) files; nothing is shown
interactively.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .core import PromptPoint, Raster, RoadGraph


def _draw_graph(ax, graph: RoadGraph, color: str, label: str, vertex_size: float = 6.0):
    pos = graph.positions()
    segs_drawn = False
    for i, j in graph.edges:
        ax.plot(
            [pos[i, 0], pos[j, 0]],
            [pos[i, 1], pos[j, 1]],
            color=color,
            linewidth=1.2,
            label=label if not segs_drawn else None,
        )
        segs_drawn = True
    if len(pos):
        ax.scatter(pos[:, 0], pos[:, 1], s=vertex_size, c=color, zorder=3,
                   label=None if segs_drawn else label)


def save_graph_figure(
    path: str | Path,
    graph: RoadGraph,
    background: Raster | None = None,
    reference: RoadGraph | None = None,
    prompts: list[PromptPoint] | None = None,
    title: str = "",
) -> None:
    """Proposal (orange) over an optional mask and reference graph (blue)."""
    fig, ax = plt.subplots(figsize=(8, 8))
    if background is not None:
        ax.imshow(background.data, cmap="gray", vmin=0.0, vmax=1.0, origin="upper")
    if reference is not None:
        _draw_graph(ax, reference, "tab:blue", "reference")
    _draw_graph(ax, graph, "tab:orange", "proposal")
    if prompts:
        pos = [(p.x, p.y) for p in prompts if p.positive]
        neg = [(p.x, p.y) for p in prompts if not p.positive]
        if pos:
            ax.scatter(*zip(*pos), marker="+", c="lime", s=60, label="positive prompts")
        if neg:
            ax.scatter(*zip(*neg), marker="x", c="red", s=60, label="negative prompts")
    ax.set_aspect("equal")
    if background is None:
        ax.invert_yaxis()
    if title:
        ax.set_title(title)
    handles, labels = ax.get_legend_handles_labels()
    if handles:
        ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_mask_figure(path: str | Path, raster: Raster, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(8, 8))
    im = ax.imshow(raster.data, cmap="viridis", vmin=0.0, vmax=1.0, origin="upper")
    fig.colorbar(im, ax=ax, shrink=0.8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(path: str | Path, curve: list[float], title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(np.arange(1, len(curve) + 1), curve, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean BCE")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
