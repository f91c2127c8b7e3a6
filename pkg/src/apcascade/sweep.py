"""Two-phase (T, then M) hyperparameter sweep scored by negative-class F1."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

from apcascade.cascade import CascadeConfig, InstructionSet, SeedSet, run_cascade
from apcascade.catalog import Catalog, LabeledCase, target_pairs
from apcascade.classifier import Classifier
from apcascade.errors import ArgumentError
from apcascade.gateway import Gateway
from apcascade.metrics import evaluate

log = logging.getLogger(__name__)

SELECTION_RULE = "max negative-class F1; ties go to the smallest T, then the smallest M"


@dataclass
class SweepReport:
    grid: dict[tuple[int, int], float] = field(default_factory=dict)
    best_T: int = 0
    chosen: tuple[int, int] = (0, 0)
    rule: str = SELECTION_RULE

    def to_dict(self) -> dict:
        return {
            "grid": [{"T": t, "M": m, "negative_f1": f} for (t, m), f in sorted(self.grid.items())],
            "best_T": self.best_T,
            "chosen": {"T": self.chosen[0], "M": self.chosen[1]},
            "rule": self.rule,
        }


def _argmax(scores: dict[int, float]) -> int:
    best = max(scores.values())
    return min(k for k, v in scores.items() if v == best)


def run_sweep(
    catalog: Catalog,
    seeds: SeedSet,
    base: CascadeConfig,
    T_range: Sequence[int],
    M_range: Sequence[int],
    gateway: Gateway,
    classifier: Classifier,
    *,
    task: str = "correctness",
    cases: Sequence[LabeledCase] | None = None,
) -> SweepReport:
    """T = 0 means plain CoT prompting (no instructions)."""
    T_range, M_range = sorted(set(T_range)), sorted(set(M_range))
    if not T_range or not M_range:
        raise ArgumentError("T and M ranges must be non-empty")
    if min(T_range) < 0 or min(M_range) < 1:
        raise ArgumentError("T must be >= 0 and M >= 1")
    cases = [c for c in (catalog.cases if cases is None else cases) if c.task == task]
    if not cases:
        raise ArgumentError(f"tuning set has no {task} cases")
    targets = target_pairs(catalog, cases)
    report = SweepReport()

    def score(iset: InstructionSet | None) -> float:
        mode = "cot" if iset is None else "apc"
        preds = classifier.run_task(cases, mode, iset)
        ev = evaluate(preds, task)
        return ev.metrics[ev.negative].f1

    def scores_for_M(m: int, ts: Sequence[int]) -> dict[int, float]:
        out: dict[int, float] = {}
        if 0 in ts:
            out[0] = score(None)
        if 1 in ts:
            out[1] = score(run_cascade(catalog, seeds, replace(base, T=1, M=m), targets, gateway))
        deeper = [t for t in ts if t >= 2]
        if deeper:
            # snapshots of one T_max run equal separate runs at smaller T
            full = run_cascade(catalog, seeds, replace(base, T=max(deeper), M=m), targets, gateway)
            for t in deeper:
                snap = full.snapshots[t]
                out[t] = score(InstructionSet(dict(snap), {t: dict(snap)}))
        return out

    phase1 = scores_for_M(base.M, T_range)
    for t, f in phase1.items():
        report.grid[(t, base.M)] = f
    report.best_T = _argmax(phase1)
    log.info("sweep phase 1: %s -> T*=%d", phase1, report.best_T)

    phase2: dict[int, float] = {}
    for m in M_range:
        if (report.best_T, m) in report.grid:
            phase2[m] = report.grid[(report.best_T, m)]
        elif report.best_T == 0:
            phase2[m] = report.grid[(0, base.M)]
        else:
            phase2[m] = scores_for_M(m, [report.best_T])[report.best_T]
        report.grid[(report.best_T, m)] = phase2[m]
    report.chosen = (report.best_T, _argmax(phase2))
    log.info("sweep phase 2: %s -> chosen %s", phase2, report.chosen)
    return report
