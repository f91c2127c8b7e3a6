"""Per-class precision/recall/F1, accuracy, and a paired subsampled bootstrap test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from apcascade.classifier import PredictionSet, negative_label, positive_label
from apcascade.errors import ArgumentError, IntegrityError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts relative to ``positive``, the class of interest."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    positive: str = ""

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False
    f1_undefined: bool = False


def _confusion(gold: Sequence[str], pred: Sequence[str], positive: str) -> ConfusionMatrix:
    tp = fp = fn = tn = 0
    for g, p in zip(gold, pred):
        if p == positive:
            if g == positive:
                tp += 1
            else:
                fp += 1
        elif g == positive:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn, positive)


def confusion_matrix(preds: PredictionSet, positive: str) -> ConfusionMatrix:
    missing = [r.case_id for r in preds.results if r.gold is None]
    if missing:
        raise IntegrityError(f"{len(missing)} prediction(s) without a gold label, e.g. {missing[0]!r}", ids=tuple(missing))
    return _confusion([r.gold for r in preds.results], [r.decision for r in preds.results], positive)


def class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    p_den, r_den = cm.tp + cm.fp, cm.tp + cm.fn
    precision = cm.tp / p_den if p_den else 0.0
    recall = cm.tp / r_den if r_den else 0.0
    return metrics_from_pr(precision, recall, p_den == 0, r_den == 0)


def metrics_from_pr(precision: float, recall: float, p_undef: bool = False, r_undef: bool = False) -> ClassMetrics:
    s = precision + recall
    f1 = 2 * precision * recall / s if s > 0 else 0.0
    return ClassMetrics(precision, recall, f1, p_undef, r_undef, s == 0)


@dataclass
class EvalReport:
    task: str
    negative: str
    positive: str
    metrics: dict[str, ClassMetrics]
    accuracy: float
    total: int
    gold_counts: dict[str, int]
    defaulted: int
    metadata: dict = field(default_factory=dict)
    effort_minutes: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = {k: asdict(v) for k, v in self.metrics.items()}  # negative class first
        return d

    def table(self) -> str:
        """Plain-text table: Class | Precision | Recall | F1 score | Effort."""
        effort = "-" if self.effort_minutes is None else f"{self.effort_minutes:g}"
        rows = [("Class", "Precision", "Recall", "F1 score", "Effort")]
        for label, m in self.metrics.items():
            rows.append((label, f"{m.precision:.2%}", f"{m.recall:.2%}", f"{m.f1:.2%}", effort))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        lines.append(f"Accuracy: {self.accuracy:.2%}  (n={self.total}, defaulted={self.defaulted})")
        return "\n".join(lines) + "\n"


def evaluate(preds: PredictionSet, task: str | None = None, *, effort_minutes: float | None = None) -> EvalReport:
    if not preds.results:
        raise ArgumentError("no predictions to evaluate")
    tasks = {r.task for r in preds.results}
    if len(tasks) > 1:
        raise ArgumentError(f"mixed tasks in one prediction set: {sorted(tasks)}")
    task = task or tasks.pop()
    if {r.task for r in preds.results} != {task}:
        raise ArgumentError(f"predictions are for task {sorted({r.task for r in preds.results})}, not {task!r}")
    neg, pos = negative_label(task), positive_label(task)
    cm_neg = confusion_matrix(preds, neg)
    cm_pos = confusion_matrix(preds, pos)
    gold = [r.gold for r in preds.results]
    return EvalReport(
        task=task,
        negative=neg,
        positive=pos,
        metrics={neg: class_metrics(cm_neg), pos: class_metrics(cm_pos)},
        accuracy=(cm_neg.tp + cm_neg.tn) / cm_neg.total,
        total=cm_neg.total,
        gold_counts={neg: gold.count(neg), pos: gold.count(pos)},
        defaulted=preds.defaulted,
        metadata=dict(preds.metadata),
        effort_minutes=effort_minutes,
    )


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 5000
    fraction: float = 0.8
    seed: int = 0
    metric: str = "negative_f1"  # or positive_f1 / macro_f1

    def __post_init__(self) -> None:
        if self.B < 1:
            raise ArgumentError("B must be >= 1")
        if not 0.0 < self.fraction <= 1.0:
            raise ArgumentError("fraction must be in (0, 1]")
        if self.metric not in ("negative_f1", "positive_f1", "macro_f1"):
            raise ArgumentError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class BootstrapResult:
    mean_delta_f1: float
    p_value: float
    B: int
    fraction: float
    seed: int
    metric: str
    n_cases: int
    draw_sizes: dict[str, int]


def _f1_vec(gold_pos: np.ndarray, pred_pos: np.ndarray) -> np.ndarray:
    """Row-wise F1 for boolean matrices (draws x cases); 0 where undefined."""
    tp = np.sum(gold_pos & pred_pos, axis=1)
    fp = np.sum(~gold_pos & pred_pos, axis=1)
    fn = np.sum(gold_pos & ~pred_pos, axis=1)
    den = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, 2 * tp / np.where(den > 0, den, 1), 0.0)


def draw_indices(class_sizes: Sequence[int], config: BootstrapConfig) -> list[np.ndarray]:
    """Per-class subsample indices for every draw: list (per class) of arrays B x k_c.

    Draw ``b`` uses a generator seeded with ``(seed, b)`` so results do not
    depend on how draws are scheduled.
    """
    ks = [math.ceil(config.fraction * n) for n in class_sizes]
    out = [np.empty((config.B, k), dtype=np.int64) for k in ks]
    for b in range(config.B):
        rng = np.random.default_rng([config.seed, b])
        for c, (n, k) in enumerate(zip(class_sizes, ks)):
            out[c][b] = rng.choice(n, size=k, replace=False)
    return out


def paired_bootstrap(
    preds_a: Mapping[str, str],
    preds_b: Mapping[str, str],
    gold: Mapping[str, str],
    task: str = "correctness",
    config: BootstrapConfig | None = None,
) -> BootstrapResult:
    """Class-balanced subsampled paired bootstrap of ΔF1 = F1(A) - F1(B).

    Inputs map case id to label. Cases are indexed by sorted id inside each
    gold class. p-value counts draws with ΔF1 <= 0, plus one, over B + 1.
    """
    config = config or BootstrapConfig()
    if set(preds_a) != set(preds_b) or set(preds_a) != set(gold):
        raise IntegrityError("prediction sets and gold labels must cover identical cases")
    neg, pos = negative_label(task), positive_label(task)
    ids = sorted(gold)
    classes = (neg, pos)
    members = [[i for i in ids if gold[i] == c] for c in classes]
    if any(not m for m in members):
        raise ArgumentError("both gold classes must be present")
    unknown = {gold[i] for i in ids} - set(classes)
    if unknown:
        raise ArgumentError(f"unknown gold labels {sorted(unknown)}")

    per_class = draw_indices([len(m) for m in members], config)
    gold_cols, a_cols, b_cols = [], [], []
    for m, idx in zip(members, per_class):
        g = np.array([gold[i] for i in m])
        a = np.array([preds_a[i] for i in m])
        b = np.array([preds_b[i] for i in m])
        gold_cols.append(g[idx])
        a_cols.append(a[idx])
        b_cols.append(b[idx])
    g = np.concatenate(gold_cols, axis=1)
    a = np.concatenate(a_cols, axis=1)
    b = np.concatenate(b_cols, axis=1)

    def score(pred: np.ndarray) -> np.ndarray:
        f_neg = _f1_vec(g == neg, pred == neg)
        if config.metric == "negative_f1":
            return f_neg
        f_pos = _f1_vec(g == pos, pred == pos)
        return f_pos if config.metric == "positive_f1" else (f_neg + f_pos) / 2

    delta = score(a) - score(b)
    p_value = (int(np.sum(delta <= 0)) + 1) / (config.B + 1)
    return BootstrapResult(
        mean_delta_f1=float(np.mean(delta)),
        p_value=p_value,
        B=config.B,
        fraction=config.fraction,
        seed=config.seed,
        metric=config.metric,
        n_cases=len(ids),
        draw_sizes={c: per_class[n].shape[1] for n, c in enumerate(classes)},
    )


def compare_predictions(
    a: PredictionSet, b: PredictionSet, config: BootstrapConfig | None = None
) -> BootstrapResult:
    ra, rb = a.by_case(), b.by_case()
    if set(ra) != set(rb):
        raise IntegrityError("prediction sets cover different cases")
    if any(r.gold is None for r in ra.values()):
        raise IntegrityError("predictions lack gold labels")
    tasks = {r.task for r in ra.values()} | {r.task for r in rb.values()}
    if len(tasks) != 1:
        raise ArgumentError(f"cannot compare across tasks {sorted(tasks)}")
    gold = {k: r.gold for k, r in ra.items()}
    return paired_bootstrap(
        {k: r.decision for k, r in ra.items()},
        {k: r.decision for k, r in rb.items()},
        gold,  # type: ignore[arg-type]
        tasks.pop(),
        config,
    )
