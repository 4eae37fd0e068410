"""SVG figures: feature scatter, metric curves, divergence curve and sweep summary.

Uses the object-oriented matplotlib API (no pyplot state).  Output is
byte-stable for identical input: the SVG hash salt is fixed and no date is
written.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .evaluation import DivergenceReport, FeatureSnapshot

SVG_SALT = "uoda"
MARKERS = {"source": "o", "target_labeled": "^", "target_unlabeled": "^"}
UNLABELED_COLOR = "0.6"


def pca_2d(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project rows onto the top-2 principal directions of the centered data.

    Returns ``(projection [n, 2], variances [2])``; columns are ordered by
    decreasing variance.  Inputs with fewer than two columns are zero-padded.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if d < 2:
        x = np.hstack([x, np.zeros((n, 2 - d))])
    if n == 0:
        return np.zeros((0, 2)), np.zeros(2)
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    # fix each direction's sign so the largest-magnitude loading is positive
    flip = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(flip == 0, 1.0, flip)[:, None]
    proj = xc @ comps.T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((n, 2 - proj.shape[1]))])
    var = np.zeros(2)
    var[: len(s[:2])] = s[:2] ** 2 / max(n - 1, 1)
    return proj, var


def _save(fig: Figure, out_path) -> None:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        fig.savefig(out_path, format="svg", metadata={"Date": None})


def _label_colors(labels: np.ndarray):
    cmap = matplotlib.colormaps["tab10"]
    return [UNLABELED_COLOR if y < 0 else cmap(int(y) % 10) for y in labels]


def emit_scatter_svg(snapshot: FeatureSnapshot, out_path, title: Optional[str] = None) -> None:
    """Scatter of generator features: marker by domain, color by label (grey when unknown)."""
    if snapshot.feature_dim == 2:
        xy, axis_names = snapshot.features, ("f_0", "f_1")
    else:
        xy, _ = pca_2d(snapshot.features.reshape(len(snapshot), snapshot.feature_dim))
        axis_names = ("PC 1", "PC 2")
    labels = np.asarray(snapshot.label)
    colors = np.array(_label_colors(labels), dtype=object)
    domains = np.asarray(snapshot.domain, dtype=object)

    fig = Figure(figsize=(5, 5))
    ax = fig.add_subplot()
    for domain, marker in MARKERS.items():
        mask = domains == domain
        if not np.any(mask):
            continue
        hollow = domain == "target_unlabeled"
        ax.scatter(xy[mask, 0], xy[mask, 1], marker=marker, s=14 if hollow else 20, linewidths=0.8,
                   facecolors="none" if hollow else list(colors[mask]),
                   edgecolors=list(colors[mask]), label=domain.replace("_", " "), gid=f"domain-{domain}")
    ax.set_xlabel(axis_names[0])
    ax.set_ylabel(axis_names[1])
    ax.set_title(title if title is not None else f"features, epoch {snapshot.epoch}")
    if len(snapshot):
        ax.legend(loc="best", fontsize=8)
    _save(fig, out_path)


def plot_metrics(rows: Sequence[Dict[str, object]], out_path) -> None:
    """Loss terms and accuracies against epoch."""
    epochs = [r["epoch"] for r in rows]
    fig = Figure(figsize=(9, 3.5))
    ax_loss, ax_acc = fig.subplots(1, 2)
    for name in ("L_src_1", "L_tar_2", "H_src", "H_tar"):
        ys = [r.get(name) for r in rows]
        if all(v is not None for v in ys) and ys:
            ax_loss.plot(epochs, ys, marker=".", label=name)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss / entropy")
    ax_loss.legend(fontsize=8)
    for name in ("target_test_accuracy", "unlabeled_accuracy"):
        ax_acc.plot(epochs, [r[name] for r in rows], marker=".", label=name.replace("_", " "))
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_path)


def plot_divergence(report: DivergenceReport, out_path) -> None:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ax.plot(report.gamma, report.frac_src, marker=".", label="source (head 1)")
    ax.plot(report.gamma, report.frac_tar, marker=".", label="unlabeled (head 2)")
    ax.plot(report.gamma, [d / 2 for d in report.d_hat], linestyle="--", label="d_hat / 2")
    ax.set_xlabel("entropy threshold gamma")
    ax.set_ylabel("fraction with H >= gamma")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_path)


def plot_sweep(param: str, rows: List[Dict[str, object]], out_path) -> None:
    """Final accuracies against the swept value; failed cells are skipped."""
    ok = [r for r in rows if r.get("status") == "ok"]
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    xs = [float(r["value"]) for r in ok]
    for name in ("unlabeled_accuracy", "target_test_accuracy"):
        ax.plot(xs, [float(r[name]) for r in ok], marker="o", label=name.replace("_", " "))
    ax.set_xlabel(param)
    ax.set_ylabel("final accuracy")
    if ok:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_path)
