"""Affordance evaluation metrics: aIoU, AUC, SIM, MAE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

THRESHOLD = 0.5


def aiou(pred_scores, gt, threshold=THRESHOLD) -> float:
    """IoU of the two maps binarised at ``threshold``; an empty union scores 1."""
    p = np.asarray(pred_scores) >= threshold
    g = np.asarray(gt) >= threshold
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def auc(pred_scores, gt, threshold=THRESHOLD) -> float | None:
    """Rank-sum ROC AUC (ties count one half); ``None`` if ``gt`` is single-class."""
    s = np.asarray(pred_scores, dtype=np.float64)
    y = np.asarray(gt) >= threshold
    n_pos = np.count_nonzero(y)
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks handle ties
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def sim(pred_scores, gt) -> float:
    """Histogram intersection of the two maps after normalising each to sum 1."""
    p = np.asarray(pred_scores, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    ps, gs = p.sum(), g.sum()
    if ps <= 0 or gs <= 0:
        return 0.0
    return float(np.minimum(p / ps, g / gs).sum())


def mae(pred_scores, gt) -> float:
    return float(np.mean(np.abs(np.asarray(pred_scores, dtype=np.float64) - np.asarray(gt, dtype=np.float64))))


@dataclass
class MetricRow:
    object_id: str
    prompt_id: str
    aiou: float
    auc: float | None
    sim: float
    mae: float
    empty_union: bool = False

    @property
    def auc_skipped(self):
        return self.auc is None


@dataclass
class MetricsReport:
    aiou: float
    auc: float
    sim: float
    mae: float
    per_object: list[MetricRow] = field(default_factory=list)

    @property
    def auc_skipped(self):
        return sum(r.auc_skipped for r in self.per_object)

    @property
    def empty_unions(self):
        return sum(r.empty_union for r in self.per_object)

    def to_text(self, header: dict | None = None) -> str:
        """Key-value report: ``key = value`` aggregates then one ``row`` line per pair."""
        lines = ["# affordance3d metrics report v1"]
        for k, v in sorted((header or {}).items()):
            lines.append(f"{k} = {v}")
        lines += [
            f"aggregate.aiou = {self.aiou:.6f}",
            f"aggregate.auc = {self.auc:.6f}",
            f"aggregate.sim = {self.sim:.6f}",
            f"aggregate.mae = {self.mae:.6f}",
            f"aggregate.pairs = {len(self.per_object)}",
            f"aggregate.auc_skipped = {self.auc_skipped}",
            f"aggregate.empty_union = {self.empty_unions}",
        ]
        for r in self.per_object:
            auc_txt = "nan" if r.auc is None else f"{r.auc:.6f}"
            lines.append(
                f"row object={r.object_id} prompt={r.prompt_id} aiou={r.aiou:.6f} auc={auc_txt} "
                f"sim={r.sim:.6f} mae={r.mae:.6f} auc_skipped={int(r.auc_skipped)} empty_union={int(r.empty_union)}"
            )
        return "\n".join(lines) + "\n"


def score_pair(object_id, prompt_id, pred, gt) -> MetricRow:
    p = np.asarray(pred) >= THRESHOLD
    g = np.asarray(gt) >= THRESHOLD
    return MetricRow(object_id, prompt_id, aiou(pred, gt), auc(pred, gt), sim(pred, gt), mae(pred, gt), not (p | g).any())


def aggregate(rows: list[MetricRow]) -> MetricsReport:
    """Average each metric over (object, prompt) pairs; AUC skips single-class pairs."""
    if not rows:
        return MetricsReport(float("nan"), float("nan"), float("nan"), float("nan"), [])
    aucs = [r.auc for r in rows if r.auc is not None]
    return MetricsReport(
        float(np.mean([r.aiou for r in rows])),
        float(np.mean(aucs)) if aucs else float("nan"),
        float(np.mean([r.sim for r in rows])),
        float(np.mean([r.mae for r in rows])),
        list(rows),
    )
