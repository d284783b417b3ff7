"""Evaluation reports: JSON metrics plus rendered ROC and score-histogram figures."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import ScoredSet, auroc, fpr_at_tpr

logger = logging.getLogger("lfod.report")

DEFAULT_TPR_TARGET = 0.95


def roc_points(sset: ScoredSet) -> tuple[np.ndarray, np.ndarray]:
    """Exact ROC curve as (fpr, tpr) arrays, one point per distinct threshold.

    OOD is the positive class and a sample is called positive when its score
    is strictly above the threshold, matching fpr_at_tpr. Points run from
    (0, 0) at a threshold above every score down to (1, 1) below every score.
    """
    sset.require_both_classes()
    id_sorted = np.sort(sset.id_scores)
    ood_sorted = np.sort(sset.ood_scores)
    n_id = id_sorted.shape[0]
    n_ood = ood_sorted.shape[0]

    thresholds = np.unique(np.concatenate([id_sorted, ood_sorted]))[::-1]
    fpr = [0.0]
    tpr = [0.0]
    for theta in thresholds:
        fpr.append((n_id - np.searchsorted(id_sorted, theta, side="right")) / n_id)
        tpr.append((n_ood - np.searchsorted(ood_sorted, theta, side="right")) / n_ood)
    return np.asarray(fpr), np.asarray(tpr)


def eval_report(sset: ScoredSet, head: str,
                tpr_target: float = DEFAULT_TPR_TARGET) -> dict:
    """Metric report for one score head: {auroc, fpr95, n_id, n_ood, head}."""
    return {
        "auroc": auroc(sset),
        "fpr95": fpr_at_tpr(sset, tpr_target),
        "n_id": int(sset.id_scores.shape[0]),
        "n_ood": int(sset.ood_scores.shape[0]),
        "head": head,
    }


def _require_pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_roc_figure(path: str | Path, sset: ScoredSet, head: str,
                      auroc_value: float | None = None) -> Path:
    """Render the ROC curve to ``path`` and return it."""
    plt = _require_pyplot()
    fpr, tpr = roc_points(sset)
    if auroc_value is None:
        auroc_value = auroc(sset)

    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.plot(fpr, tpr, drawstyle="steps-post", color="tab:blue",
            label=f"{head} (AUROC {auroc_value:.4f})")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"ROC, head={head}")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_histogram_figure(path: str | Path, sset: ScoredSet, head: str,
                            bins: int = 50) -> Path:
    """Render overlaid ID/OOD score histograms to ``path`` and return it."""
    plt = _require_pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    lo = min(sset.id_scores.min(), sset.ood_scores.min())
    hi = max(sset.id_scores.max(), sset.ood_scores.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    ax.hist(sset.id_scores, bins=edges, alpha=0.6, label="ID", color="tab:blue")
    ax.hist(sset.ood_scores, bins=edges, alpha=0.6, label="OOD", color="tab:red")
    ax.set_xlabel(f"{head} score (higher = more OOD)")
    ax.set_ylabel("Count")
    ax.set_title(f"Score distribution, head={head}")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_eval_report(out_path: str | Path, sset: ScoredSet, head: str, *,
                      figures: bool = True,
                      tpr_target: float = DEFAULT_TPR_TARGET) -> dict:
    """Write the JSON metric report; render figures next to it unless disabled.

    Figures land beside ``out_path`` as ``<stem>_roc.png`` and
    ``<stem>_hist.png``. Returns the report dict.
    """
    out_path = Path(out_path)
    if out_path.suffix != ".json":
        raise ConfigError(f"eval report path must end in .json, got {out_path}")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report = eval_report(sset, head, tpr_target)
    out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %s", out_path)
    if figures:
        roc_path = out_path.with_name(out_path.stem + "_roc.png")
        hist_path = out_path.with_name(out_path.stem + "_hist.png")
        render_roc_figure(roc_path, sset, head, auroc_value=report["auroc"])
        render_histogram_figure(hist_path, sset, head)
        logger.info("wrote %s and %s", roc_path, hist_path)
    return report
