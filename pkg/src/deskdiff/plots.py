"""Figure rendering for command reports.

Every function takes the same row dictionaries the CSV writers consume and
renders a PNG next to them. The Agg backend is forced before pyplot is
imported so report generation works in headless environments.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

__all__ = [
    "plot_z_power",
    "plot_mask_trajectories",
    "plot_variations",
    "plot_sweep",
    "plot_convergence",
    "plot_iou",
    "plot_bench",
]


def _finish(fig, path: Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_z_power(rows: Sequence[dict], path) -> Path:
    """Per-transition noise-map power from an inversion."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["t"] for r in rows]
    power = [r["z_power"] for r in rows]
    ax.plot(steps, power, marker="o", ms=3)
    ax.set_xlabel("grid step t")
    ax.set_ylabel("mean z^2")
    ax.set_title("extracted noise power per transition")
    ax.invert_xaxis()
    return _finish(fig, path)


def plot_mask_trajectories(rows: Sequence[dict], path) -> Path:
    """Mask pixel counts over steps, one panel per mask kind."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2), sharex=True, sharey=True)
    kinds = ("m1_count", "m2_count", "phi_count")
    labels = sorted({(r["concept"], r["label"]) for r in rows})
    for ax, kind in zip(axes, kinds):
        for concept, label in labels:
            sub = [r for r in rows if r["concept"] == concept]
            ax.plot([r["t"] for r in sub], [r[kind] for r in sub],
                    marker=".", label=label or f"concept {concept}")
        ax.set_title(kind.replace("_count", " pixels"))
        ax.set_xlabel("t")
        ax.invert_xaxis()
    axes[0].set_ylabel("selected pixels")
    axes[0].legend(fontsize=7)
    return _finish(fig, path)


def _show_field(ax, field: np.ndarray) -> None:
    if field.shape[0] == 3:
        lo, hi = field.min(), field.max()
        img = (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)
        ax.imshow(np.transpose(img, (1, 2, 0)))
    else:
        ax.imshow(field[0], cmap="gray")
    ax.set_xticks(())
    ax.set_yticks(())


def plot_variations(panels: Sequence[tuple[str, Sequence[np.ndarray]]], path) -> Path:
    """Montage: one row per variation, one column per named field."""
    n_rows = len(panels)
    n_cols = max(len(fields) for _, fields in panels)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.2 * n_cols, 2.2 * n_rows), squeeze=False)
    for r, (name, fields) in enumerate(panels):
        for c, field in enumerate(fields):
            _show_field(axes[r][c], field)
        axes[r][0].set_ylabel(name, fontsize=8)
    for c, title in enumerate(("input", "reconstruction", "edited")[:n_cols]):
        axes[0][c].set_title(title, fontsize=9)
    return _finish(fig, path)


def plot_sweep(rows: Sequence[dict], path) -> Path:
    """Edit-strength projections against guidance scale."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    scales = [r["scale"] for r in rows]
    ax.plot(scales, [r["projection"] for r in rows], marker="o", label="projection")
    ax.plot(scales, [r["rms_delta"] for r in rows], marker="s", ls="--", label="rms delta")
    ax.set_xlabel("guidance scale")
    ax.set_ylabel("edit magnitude")
    ax.set_title("edit strength versus scale")
    ax.legend(fontsize=8)
    return _finish(fig, path)


def plot_convergence(rows: Sequence[dict], path) -> Path:
    """Log-log discretization error against step count, per solver family."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for family in sorted({r["family"] for r in rows}):
        sub = [r for r in rows if r["family"] == family]
        ax.loglog([r["n_steps"] for r in sub], [r["rel_error"] for r in sub],
                  marker="o", label=family)
    ax.set_xlabel("grid steps")
    ax.set_ylabel("relative error vs continuum")
    ax.set_title("solver refinement")
    ax.legend(fontsize=8)
    return _finish(fig, path)


def plot_iou(rows: Sequence[dict], path) -> Path:
    """Mask agreement against ground truth across probe steps."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = sorted({r["t"] for r in rows})
    for key, label in (("iou_m1", "attention mask"), ("iou_m2", "noise mask"),
                       ("iou_inter", "intersection")):
        means = [float(np.mean([r[key] for r in rows if r["t"] == t])) for t in steps]
        ax.plot(steps, means, marker="o", label=label)
    ax.set_xlabel("probe step t")
    ax.set_ylabel("mean IoU")
    ax.set_title("implicit masks versus ground truth")
    ax.invert_xaxis()
    ax.legend(fontsize=8)
    return _finish(fig, path)


def plot_bench(rows: Sequence[dict], path) -> Path:
    """Predicted versus measured model evaluations per phase."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    phases = [r["phase"] for r in rows]
    x = np.arange(len(phases))
    ax.bar(x - 0.18, [r["predicted"] for r in rows], width=0.36, label="predicted")
    ax.bar(x + 0.18, [r["measured"] for r in rows], width=0.36, label="measured")
    ax.set_xticks(x, phases)
    ax.set_ylabel("model evaluations")
    ax.set_title("evaluation budget check")
    ax.legend(fontsize=8)
    return _finish(fig, path)
