"""Figures written next to the CSV reports (Agg backend, PNG bytes)."""

from __future__ import annotations

import io
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def auc_bars(reports) -> bytes:
    """Grouped bars: mean AUC per predictor, one group per distribution tag, std as error bars."""
    tags = list(dict.fromkeys(r.tag for r in reports))
    preds = list(dict.fromkeys(r.predictor_id for r in reports))
    by = {(r.predictor_id, r.tag): r for r in reports}
    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(tags) * max(1, len(preds)) / 3), 4))
    width = 0.8 / max(1, len(preds))
    for i, p in enumerate(preds):
        xs = [j + i * width for j in range(len(tags))]
        ax.bar(xs, [by[(p, t)].mean for t in tags], width, yerr=[by[(p, t)].std for t in tags], label=p)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(tags))], tags)
    ax.axhline(0.5, color="grey", lw=0.8, ls="--")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("AUC-ROC")
    ax.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    return _png(fig)


def iia_vs_auc(points, rho: float) -> bytes:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.scatter([p.iia for p in points], [p.auc for p in points])
    for p in points:
        ax.annotate(p.checkpoint_id, (p.iia, p.auc), fontsize=7)
    ax.set_xlabel("IIA")
    ax.set_ylabel("counterfactual simulation AUC-ROC")
    ax.set_title(f"Spearman = {rho:.3f}")
    fig.tight_layout()
    return _png(fig)


def loss_curve(steps: Sequence[int], losses: Sequence[float], title: str = "DAS loss") -> bytes:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(list(steps), list(losses))
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.set_title(title)
    fig.tight_layout()
    return _png(fig)
