"""Attribute quality classification: render prompt, call the model, parse the decision."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from apcascade.cascade import Instruction, InstructionSet
from apcascade.catalog import Catalog, LabeledCase
from apcascade.errors import ArgumentError, CoverageError, MissingInstruction, ParseError
from apcascade.gateway import DEFAULT_MAX_TOKENS, Gateway, LlmRequest
from apcascade.templates import (
    TASK_LABELS,
    RenderedPrompt,
    RuleBook,
    render_apc,
    render_baseline,
    render_cot,
)

log = logging.getLogger(__name__)

MODES = ("baseline", "cot", "apc")
FORMAT_REMINDER = "\n\nAnswer strictly in the output format given above: a 'reasoning:' line, then a 'prediction:' line."

# a tag may sit in a markdown bullet or bold span; the closing bold after the
# colon is only consumed when the tag opened one
_TAG_RE = re.compile(
    r"^[ \t#>*-]*?(\*\*|__)?[ \t]*(reasoning|prediction)[ \t]*(?:\*\*|__)?[ \t]*:(?(1)(?:\*\*|__)?)[ \t]*",
    re.I | re.M,
)
_STRIP = " \t\r\n'\"`*_.,;:!<>()[]{}"


def positive_label(task: str) -> str:
    return _task_labels(task)[0]


def negative_label(task: str) -> str:
    return _task_labels(task)[1]


def _task_labels(task: str) -> tuple[str, str]:
    try:
        return TASK_LABELS[task]
    except KeyError:
        raise ArgumentError(f"unknown task {task!r}") from None


def gold_label(case: LabeledCase) -> str:
    pos, neg = _task_labels(case.task)
    return pos if case.gold == "positive" else neg


def _fields(raw: str) -> dict[str, list[str]]:
    found: dict[str, list[str]] = {}
    matches = list(_TAG_RE.finditer(raw))
    for n, m in enumerate(matches):
        end = matches[n + 1].start() if n + 1 < len(matches) else len(raw)
        found.setdefault(m.group(2).lower(), []).append(raw[m.end() : end])
    return found


def parse_decision(raw: str, task: str) -> tuple[str, str]:
    """Extract ``(decision, rationale)`` from tagged model output.

    Tags are matched case-insensitively at line start; the label is folded
    (case, whitespace, quotes, punctuation) and must be one of the task's two
    labels. Anything else raises :class:`ParseError`.
    """
    labels = _task_labels(task)
    fields = _fields(raw)
    predictions = fields.get("prediction")
    if not predictions:
        raise ParseError("no 'prediction:' field in model output")
    decided = set()
    for value in predictions:
        folded = " ".join(value.strip().splitlines()[0].split()).strip(_STRIP).casefold() if value.strip() else ""
        match = [label for label in labels if label.casefold() == folded]
        if not match:
            raise ParseError(f"unrecognised label {value.strip()[:40]!r}")
        decided.add(match[0])
    if len(decided) != 1:
        raise ParseError(f"ambiguous prediction: {sorted(decided)}")
    reasoning = fields.get("reasoning", [""])
    return decided.pop(), reasoning[0].strip()


def format_output(reasoning: str, decision: str) -> str:
    return f"reasoning: {reasoning}\nprediction: {decision}"


@dataclass(frozen=True)
class ClassificationResult:
    case_id: str
    task: str
    decision: str
    rationale: str
    raw: str
    input_tokens: int
    output_tokens: int
    mode: str
    parse_status: str
    gold: str | None = None
    pc_id: str = ""
    sa_id: str = ""

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "task": self.task,
            "pc_id": self.pc_id,
            "sa_id": self.sa_id,
            "mode": self.mode,
            "decision": self.decision,
            "gold": self.gold,
            "parse_status": self.parse_status,
            "rationale": self.rationale,
            "raw": self.raw,
            "usage": {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassificationResult":
        usage = d.get("usage", {})
        return cls(
            case_id=d["case_id"],
            task=d["task"],
            decision=d["decision"],
            rationale=d.get("rationale", ""),
            raw=d.get("raw", ""),
            input_tokens=int(usage.get("input_tokens", 0)),
            output_tokens=int(usage.get("output_tokens", 0)),
            mode=d.get("mode", ""),
            parse_status=d.get("parse_status", "ok"),
            gold=d.get("gold"),
            pc_id=d.get("pc_id", ""),
            sa_id=d.get("sa_id", ""),
        )


@dataclass
class PredictionSet:
    results: list[ClassificationResult]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.results)

    @property
    def defaulted(self) -> int:
        return sum(r.parse_status == "defaulted" for r in self.results)

    def by_case(self) -> dict[str, ClassificationResult]:
        return {r.case_id: r for r in self.results}

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for r in self.results:
                fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
        meta = path.with_suffix(".meta.json")
        meta.write_text(json.dumps(self.metadata, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "PredictionSet":
        path = Path(path)
        results = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    results.append(ClassificationResult.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(f"{path}:{lineno}: bad prediction record ({exc})", lineno, str(path)) from exc
        meta_path = path.with_suffix(".meta.json")
        metadata = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        return cls(results, metadata)


@dataclass
class Classifier:
    """Holds everything that is fixed across a run: model, rules, parse policy."""

    gateway: Gateway
    catalog: Catalog
    model_id: str = "classifier"
    temperature: float = 0.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    rulebook: RuleBook = field(default_factory=RuleBook)
    hard_fail: bool = False

    def render(self, case: LabeledCase, mode: str, instruction: Instruction | None = None) -> RenderedPrompt:
        product = self.catalog.products[case.product_id]
        sa = self.catalog.sas[case.sa_id]
        names = {k: v.name for k, v in self.catalog.sas.items()}
        if mode == "baseline":
            return render_baseline(product, sa, case.test_value, task=case.task, sa_names=names)
        rules = self.rulebook.for_sa(sa)
        if mode == "cot":
            return render_cot(product, sa, case.test_value, rules, task=case.task, sa_names=names)
        if mode == "apc":
            if instruction is None:
                raise MissingInstruction(f"apc mode needs an instruction for ({product.pc_id}, {sa.id})")
            return render_apc(product, sa, case.test_value, rules, instruction, task=case.task, sa_names=names)
        raise ArgumentError(f"mode must be one of {MODES}")

    def classify_one(self, case: LabeledCase, mode: str, instruction: Instruction | None = None) -> ClassificationResult:
        prompt = self.render(case, mode, instruction).text
        usage_in = usage_out = 0
        raw = ""
        for attempt in range(2):
            response = self.gateway.complete(
                LlmRequest(
                    prompt=prompt + (FORMAT_REMINDER if attempt else ""),
                    model_id=self.model_id,
                    temperature=self.temperature,
                    max_tokens=self.max_tokens,
                    purpose="classification",
                )
            )
            raw = response.text
            usage_in += response.usage.input_tokens
            usage_out += response.usage.output_tokens
            try:
                decision, rationale = parse_decision(raw, case.task)
            except ParseError:
                continue
            return self._result(case, mode, decision, rationale, raw, usage_in, usage_out, "ok")
        if self.hard_fail:
            raise ParseError(f"unparseable output for case {case.id!r} after retry")
        log.info("case %s: defaulting to the positive class after two unparseable outputs", case.id)
        return self._result(case, mode, positive_label(case.task), "", raw, usage_in, usage_out, "defaulted")

    def _result(self, case, mode, decision, rationale, raw, n_in, n_out, status) -> ClassificationResult:
        pc_id = self.catalog.products[case.product_id].pc_id
        return ClassificationResult(
            case_id=case.id,
            task=case.task,
            decision=decision,
            rationale=rationale,
            raw=raw,
            input_tokens=n_in,
            output_tokens=n_out,
            mode=mode,
            parse_status=status,
            gold=gold_label(case),
            pc_id=pc_id,
            sa_id=case.sa_id,
        )

    def run_task(
        self,
        cases: Sequence[LabeledCase],
        mode: str,
        instruction_set: InstructionSet | None = None,
        *,
        instruction_set_id: str = "",
    ) -> PredictionSet:
        if mode not in MODES:
            raise ArgumentError(f"mode must be one of {MODES}")
        instructions: list[Instruction | None] = [None] * len(cases)
        if mode == "apc":
            if instruction_set is None:
                raise CoverageError("apc mode needs an instruction set")
            missing = set()
            for n, case in enumerate(cases):
                pair = self.catalog.case_pair(case)
                instructions[n] = instruction_set.get(*pair)
                if instructions[n] is None:
                    missing.add(pair)
            if missing:
                pairs = sorted(missing)
                raise CoverageError(f"no instruction for {len(pairs)} pair(s): {pairs}", pairs)

        with ThreadPoolExecutor(max_workers=self.gateway.max_in_flight) as pool:
            results = list(pool.map(lambda args: self.classify_one(args[0], mode, args[1]), zip(cases, instructions)))
        results.sort(key=lambda r: r.case_id)
        preds = PredictionSet(
            results,
            {
                "model_id": self.model_id,
                "mode": mode,
                "instruction_set_id": instruction_set_id,
                "cases": len(results),
                "defaulted": sum(r.parse_status == "defaulted" for r in results),
                "input_tokens": sum(r.input_tokens for r in results),
                "output_tokens": sum(r.output_tokens for r in results),
            },
        )
        if preds.defaulted:
            log.warning("%d of %d results defaulted after unparseable output", preds.defaulted, len(preds))
        return preds


def classify_one(
    case: LabeledCase,
    catalog: Catalog,
    mode: str,
    instruction: Instruction | None,
    gateway: Gateway,
    **kwargs,
) -> ClassificationResult:
    return Classifier(gateway, catalog, **kwargs).classify_one(case, mode, instruction)


def run_task(
    cases: Iterable[LabeledCase],
    catalog: Catalog,
    mode: str,
    instruction_set: InstructionSet | None,
    gateway: Gateway,
    **kwargs,
) -> PredictionSet:
    return Classifier(gateway, catalog, **kwargs).run_task(list(cases), mode, instruction_set)
