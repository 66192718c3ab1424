"""Ranking metrics for binary task heads: AUROC, AUPR, and DeLong
variance/confidence intervals plus the paired two-model test.

All AUC computations use midranks so that tied scores count half a pair;
the DeLong structural components are built from the same midranks, which
makes the DeLong point estimate equal the pair-counting AUROC exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import SchemaError, UndefinedMetricError

__all__ = [
    "ScoredSet", "TaskResult", "EvalReport", "auroc", "aupr",
    "delong_ci", "delong_paired_pvalue", "build_report",
]


@dataclass(frozen=True)
class ScoredSet:
    """Scores with binary labels for one task."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if scores.ndim != 1 or labels.ndim != 1:
            raise SchemaError("scores and labels must be one-dimensional")
        if scores.shape != labels.shape:
            raise SchemaError(
                f"{scores.shape[0]} scores vs {labels.shape[0]} labels")
        if not np.all(np.isfinite(scores)):
            raise SchemaError("scores must be finite")
        if labels.size and not np.all(np.isin(labels, (0, 1))):
            raise SchemaError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _require_both_classes(s: ScoredSet, minimum: int = 1) -> None:
    if s.n_pos < minimum or s.n_neg < minimum:
        raise UndefinedMetricError(
            f"need >= {minimum} of each class, got {s.n_pos} positive "
            f"and {s.n_neg} negative")


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney pair statistic with ties counted one half."""
    _require_both_classes(s)
    ranks = _midranks(s.scores)
    n_pos, n_neg = s.n_pos, s.n_neg
    pos_rank_sum = float(ranks[s.labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def aupr(s: ScoredSet) -> float:
    """Area under the precision-recall step curve, sweeping thresholds in
    descending score order with tied scores grouped into one step."""
    _require_both_classes(s)
    order = np.argsort(-s.scores, kind="stable")
    scores = s.scores[order]
    labels = s.labels[order]
    tp = np.cumsum(labels)
    predicted = np.arange(1, labels.size + 1)
    # keep only the last index of each tied-score block
    keep = np.ones(labels.size, dtype=bool)
    keep[:-1] = scores[:-1] != scores[1:]
    tp, predicted = tp[keep], predicted[keep]
    precision = tp / predicted
    recall = tp / s.n_pos
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev_recall) * precision))


def _delong_components(s: ScoredSet) -> tuple[float, np.ndarray, np.ndarray]:
    """Structural components (V10 over positives, V01 over negatives) via
    midranks; returns (theta, v10, v01)."""
    pos = s.scores[s.labels == 1]
    neg = s.scores[s.labels == 0]
    m, n = pos.size, neg.size
    all_ranks = _midranks(s.scores)
    pos_ranks = _midranks(pos)
    neg_ranks = _midranks(neg)
    v10 = (all_ranks[s.labels == 1] - pos_ranks) / n
    v01 = 1.0 - (all_ranks[s.labels == 0] - neg_ranks) / m
    theta = float(v10.mean())
    return theta, v10, v01


def _delong_variance(s: ScoredSet) -> tuple[float, float]:
    theta, v10, v01 = _delong_components(s)
    var = v10.var(ddof=1) / v10.size + v01.var(ddof=1) / v01.size
    return theta, float(var)


def delong_ci(s: ScoredSet, level: float = 0.95) -> tuple[float, float, float]:
    """(auc, low, high): normal-approximation interval from the DeLong
    variance estimate, clamped to [0, 1]."""
    if not 0.0 < level < 1.0:
        raise SchemaError(f"confidence level {level} outside (0, 1)")
    _require_both_classes(s, minimum=2)
    _, var = _delong_variance(s)
    theta = auroc(s)  # identical estimator; keep the identity bit-exact
    z = float(norm.ppf(0.5 + level / 2.0))
    half = z * np.sqrt(max(var, 0.0))
    return theta, max(theta - half, 0.0), min(theta + half, 1.0)


def delong_paired_pvalue(set_a: ScoredSet, set_b: ScoredSet) -> float:
    """Two-sided z-test on the AUC difference of two models scored on the
    same labeled examples, using the paired DeLong covariance."""
    if not np.array_equal(set_a.labels, set_b.labels):
        raise SchemaError("paired test requires identical labels")
    _require_both_classes(set_a, minimum=2)
    theta_a, v10_a, v01_a = _delong_components(set_a)
    theta_b, v10_b, v01_b = _delong_components(set_b)
    m, n = v10_a.size, v01_a.size
    s10 = np.cov(np.stack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.stack([v01_a, v01_b]), ddof=1)
    var = (s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / m \
        + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n
    diff = theta_a - theta_b
    if var <= 1e-24:
        # identical (or numerically identical) component vectors: no
        # detectable difference unless the point estimates differ
        return 1.0 if abs(diff) <= 1e-12 else 0.0
    z = diff / np.sqrt(var)
    return float(2.0 * norm.sf(abs(z)))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskResult:
    auroc: float
    aupr: float
    ci_low: float
    ci_high: float
    n_pos: int
    n_neg: int


@dataclass
class EvalReport:
    """Per-task metrics plus unweighted group means.

    Tasks whose validation split contains a single class are absent from
    ``tasks`` (and therefore from every group mean)."""

    tasks: dict[str, TaskResult] = field(default_factory=dict)
    group_means: dict[str, float] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tasks": {
                key: {"auroc": r.auroc, "aupr": r.aupr,
                      "ci95": [r.ci_low, r.ci_high],
                      "n_pos": r.n_pos, "n_neg": r.n_neg}
                for key, r in self.tasks.items()
            },
            "group_means": dict(self.group_means),
            "skipped": list(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        """Aligned-column text table: one row per task, then group means."""
        header = ("task", "auroc", "aupr", "ci95", "n+", "n-")
        rows = [header]
        for key in sorted(self.tasks):
            r = self.tasks[key]
            rows.append((key, f"{r.auroc:.4f}", f"{r.aupr:.4f}",
                         f"[{r.ci_low:.3f}, {r.ci_high:.3f}]",
                         str(r.n_pos), str(r.n_neg)))
        for name in sorted(self.group_means):
            rows.append((f"mean[{name}]", f"{self.group_means[name]:.4f}",
                         "", "", "", ""))
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        lines = []
        for idx, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(w)
                                   for cell, w in zip(row, widths)).rstrip())
            if idx == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines)


def build_report(per_task: dict[str, ScoredSet],
                 groups: dict[str, list[str]] | None = None) -> EvalReport:
    """Compute AUROC/AUPR/CI per task and unweighted means per group.

    Single-class tasks are recorded in ``skipped``; a task with fewer than
    two examples of either class gets a degenerate CI equal to its point
    estimate."""
    report = EvalReport()
    for key in sorted(per_task):
        s = per_task[key]
        if s.n_pos < 1 or s.n_neg < 1:
            report.skipped.append(key)
            continue
        value = auroc(s)
        if s.n_pos >= 2 and s.n_neg >= 2:
            _, low, high = delong_ci(s)
        else:
            low = high = value
        report.tasks[key] = TaskResult(
            auroc=value, aupr=aupr(s), ci_low=low, ci_high=high,
            n_pos=s.n_pos, n_neg=s.n_neg)
    for name, keys in (groups or {}).items():
        members = [report.tasks[k].auroc for k in keys if k in report.tasks]
        if members:
            report.group_means[name] = float(np.mean(members))
    return report
