"""Prompt rendering: baseline, chain-of-thought, cascade (APC) and instruction generation.

Every prompt is a list of sections. ``RenderedPrompt.text`` is always the
sections joined by a blank line, so a section can be removed or compared on
its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

from apcascade.catalog import Product, StructuredAttribute
from apcascade.errors import ArgumentError, IntegrityError

if TYPE_CHECKING:
    from apcascade.cascade import Instruction

SECTION_SEP = "\n\n"

INTRODUCTION = "Introduction"
PRODUCT_DATA = "Product data"
RULES = "Rules"
TEST_VALUE = "Test value"
INSTRUCTION = "Instruction"
OUTPUT_FORMAT = "Output format"
EXAMPLES = "Examples"
TARGET = "Target"


class TemplateKind(str, Enum):
    BASELINE = "baseline"
    COT = "cot"
    APC = "apc"
    INSTRUCTION_GEN = "instruction_gen"


CANONICAL_ORDER: dict[TemplateKind, tuple[str, ...]] = {
    TemplateKind.BASELINE: (INTRODUCTION, PRODUCT_DATA, TEST_VALUE, OUTPUT_FORMAT),
    TemplateKind.COT: (INTRODUCTION, PRODUCT_DATA, RULES, TEST_VALUE, OUTPUT_FORMAT),
    TemplateKind.APC: (INTRODUCTION, PRODUCT_DATA, RULES, TEST_VALUE, INSTRUCTION, OUTPUT_FORMAT),
    TemplateKind.INSTRUCTION_GEN: (INTRODUCTION, EXAMPLES, TARGET, OUTPUT_FORMAT),
}

# (positive, negative) labels per task; applicability reuses the correctness wording
TASK_LABELS: dict[str, tuple[str, str]] = {
    "correctness": ("Correct", "Incorrect"),
    "applicability": ("Applicable", "Inapplicable"),
}

PLACEHOLDERS = (
    "<Product data goes here.>",
    "<CoT rules go here.>",
    "<Output format>",
)


@dataclass(frozen=True)
class Section:
    header: str
    text: str


@dataclass(frozen=True)
class RenderedPrompt:
    kind: TemplateKind
    sections: tuple[Section, ...]

    @property
    def text(self) -> str:
        return SECTION_SEP.join(s.text for s in self.sections)

    def headers(self) -> list[str]:
        return [s.header for s in self.sections]

    def section(self, header: str) -> Section:
        for s in self.sections:
            if s.header == header:
                return s
        raise KeyError(header)

    def without(self, header: str) -> str:
        return SECTION_SEP.join(s.text for s in self.sections if s.header != header)


@dataclass(frozen=True)
class CotRuleSet:
    sa_group: str
    rules: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))


DEFAULT_RULES = CotRuleSet(
    "default",
    (
        "Work out what the attribute '{sa}' means for this kind of product before reading the test value.",
        "Find every part of the product data (title, description, bullet points, structured attributes) "
        "that mentions '{sa}' or a component it could describe.",
        "Check whether any of that evidence states a value that cannot hold at the same time as the test value.",
        "Treat missing or vague evidence as no contradiction.",
        "Only predict '{negative}' when the product data clearly contradicts the test value.",
    ),
)

NUMERIC_RULES = CotRuleSet(
    "numeric",
    (
        "Work out what the attribute '{sa}' measures for this kind of product and which unit it is usually given in.",
        "Find every number in the product data that could describe '{sa}' and note its unit.",
        "Convert the test value and the evidence to the same unit before comparing them.",
        "Allow for rounding and for ranges; treat missing evidence as no contradiction.",
        "Only predict '{negative}' when a stated quantity clearly disagrees with the test value.",
    ),
)


class RuleBook:
    """CoT rules keyed by attribute group; lookup is sa id, then value kind, then default."""

    def __init__(self, groups: Mapping[str, CotRuleSet] | None = None):
        self.groups: dict[str, CotRuleSet] = {"default": DEFAULT_RULES, "numeric": NUMERIC_RULES}
        self.groups.update(groups or {})

    def for_sa(self, sa: StructuredAttribute) -> CotRuleSet:
        for key in (sa.id, sa.value_kind, "default"):
            if key in self.groups:
                return self.groups[key]
        raise KeyError(sa.id)


def serialize_product(product: Product, sa_names: Mapping[str, str], exclude_sa: str | None = None) -> str:
    lines = [f"Title: {product.title}", f"Description: {product.description}", "Bullets:"]
    lines += [f"- {b}" for b in product.bullets] or ["- (none)"]
    lines.append("Structured attributes:")
    attrs = [(sa_names.get(k, k), v) for k, v in sorted(product.sa_values.items()) if k != exclude_sa]
    lines += [f"- {name}: {value}" for name, value in attrs] or ["- (none)"]
    return "\n".join(lines)


def output_format_block(task: str) -> str:
    pos, neg = _labels(task)
    return (
        "reasoning: <your step-by-step reasoning>\n"
        f"prediction: <'{pos}' or '{neg}'>"
    )


def _labels(task: str) -> tuple[str, str]:
    try:
        return TASK_LABELS[task]
    except KeyError:
        raise ArgumentError(f"unknown task {task!r}") from None


def _check_value(test_value: str) -> None:
    if not test_value or not test_value.strip():
        raise ArgumentError("test_value must be non-empty")


def _h(header: str, *lines: str) -> Section:
    return Section(header, "\n".join((f"### {header}:",) + lines))


def _auditor_preamble(sa_name: str) -> str:
    return (
        "You are an auditor for an e-commerce store. You are given a product and its data below. "
        f"You will also be given a test value for '{sa_name}'."
    )


def render_baseline(
    product: Product,
    sa: StructuredAttribute,
    test_value: str,
    *,
    task: str = "correctness",
    sa_names: Mapping[str, str] | None = None,
) -> RenderedPrompt:
    _check_value(test_value)
    pos, neg = _labels(task)
    sections = (
        Section(INTRODUCTION, _auditor_preamble(sa.name)),
        Section(PRODUCT_DATA, serialize_product(product, sa_names or {}, exclude_sa=sa.id)),
        Section(
            TEST_VALUE,
            f"The test value for '{sa.name}' is '{test_value}'.\n"
            f"Based on the given product data, you have to say if the test value is '{pos}' or '{neg}'. "
            f"If the product data does not contradict the given value, your prediction should be '{pos}'.",
        ),
        Section(
            OUTPUT_FORMAT,
            "Output the results in the following output format.\n" + output_format_block(task),
        ),
    )
    return RenderedPrompt(TemplateKind.BASELINE, sections)


def _cot_sections(
    product: Product,
    sa: StructuredAttribute,
    test_value: str,
    rules: CotRuleSet,
    task: str,
    sa_names: Mapping[str, str] | None,
) -> list[Section]:
    _check_value(test_value)
    if not rules.rules:
        raise ArgumentError(f"rule set {rules.sa_group!r} is empty")
    pos, neg = _labels(task)
    rule_lines = [
        f"{n}. " + r.replace("{sa}", sa.name).replace("{positive}", pos).replace("{negative}", neg)
        for n, r in enumerate(rules.rules, start=1)
    ]
    return [
        _h(
            INTRODUCTION,
            _auditor_preamble(sa.name),
            f"Please classify the value as '{pos}' or '{neg}' based on the rules given below.",
        ),
        _h(
            PRODUCT_DATA,
            "Given below is the product data.",
            serialize_product(product, sa_names or {}, exclude_sa=sa.id),
        ),
        _h(
            RULES,
            "To ensure accurate predictions, adhere to the following rules in sequence "
            "and think systematically before responding:",
            *rule_lines,
        ),
        _h(TEST_VALUE, f"Now verify the test value of the attribute '{sa.name}': '{test_value}'."),
        _h(OUTPUT_FORMAT, "Output the results in the following output format.", output_format_block(task)),
    ]


def render_cot(
    product: Product,
    sa: StructuredAttribute,
    test_value: str,
    rules: CotRuleSet,
    *,
    task: str = "correctness",
    sa_names: Mapping[str, str] | None = None,
) -> RenderedPrompt:
    return RenderedPrompt(TemplateKind.COT, tuple(_cot_sections(product, sa, test_value, rules, task, sa_names)))


def instruction_section(sa_name: str, instruction_text: str) -> Section:
    return _h(
        INSTRUCTION,
        f"Go through this instruction to understand what '{sa_name}' means in context of this product.",
        f"Here is some additional information about '{sa_name}' to help you make highly accurate classifications.",
        "In your reasoning, explain how you applied this information to reach your conclusion.",
        "",
        instruction_text.strip(),
    )


def render_apc(
    product: Product,
    sa: StructuredAttribute,
    test_value: str,
    rules: CotRuleSet,
    instruction: "Instruction",
    *,
    task: str = "correctness",
    sa_names: Mapping[str, str] | None = None,
) -> RenderedPrompt:
    """CoT prompt plus an Instruction section placed after the test value."""
    if (instruction.pc_id, instruction.sa_id) != (product.pc_id, sa.id):
        raise IntegrityError(
            f"instruction for ({instruction.pc_id}, {instruction.sa_id}) used with ({product.pc_id}, {sa.id})",
            ids=(instruction.pc_id, instruction.sa_id),
        )
    sections = _cot_sections(product, sa, test_value, rules, task, sa_names)
    sections.insert(len(sections) - 1, instruction_section(sa.name, instruction.text))
    return RenderedPrompt(TemplateKind.APC, tuple(sections))


@dataclass(frozen=True)
class FewShot:
    pc_definition: str
    sa_definition: str
    text: str


def render_instruction_prompt(
    pc_def: str,
    sa_def: str,
    fewshots: Sequence[FewShot] | Iterable[tuple[str, str, str]],
    *,
    max_fewshots: int | None = None,
) -> RenderedPrompt:
    shots = [s if isinstance(s, FewShot) else FewShot(*s) for s in fewshots]
    if not shots:
        raise ArgumentError("at least one few-shot example is required")
    if max_fewshots is not None and len(shots) > max_fewshots:
        raise ArgumentError(f"{len(shots)} few-shot examples exceed the configured maximum {max_fewshots}")
    if not pc_def.strip() or not sa_def.strip():
        raise ArgumentError("product category and attribute definitions must be non-empty")

    blocks = []
    for n, shot in enumerate(shots, start=1):
        blocks.append(
            f"Example {n}:\n"
            f"Product category definition: {shot.pc_definition.strip()}\n"
            f"Attribute definition: {shot.sa_definition.strip()}\n"
            f"Instruction: {shot.text.strip()}"
        )
    sections = (
        _h(
            INTRODUCTION,
            "You write instructions for auditors who check product attribute values in an e-commerce catalog.",
            "An instruction explains what an attribute means for one specific product category, "
            "which part of the product it refers to, and how to handle ambiguous or indirect evidence.",
            "Study the examples below. Each pairs a product category and an attribute with an expert instruction.",
        ),
        _h(EXAMPLES, "\n\n".join(blocks)),
        _h(
            TARGET,
            "Write an instruction in the same style for the following product category and attribute.",
            f"Product category definition: {pc_def.strip()}",
            f"Attribute definition: {sa_def.strip()}",
        ),
        _h(
            OUTPUT_FORMAT,
            "Respond with the instruction only, in 1-3 sentences, on a single line in the following format.",
            "instruction: <the instruction>",
        ),
    )
    return RenderedPrompt(TemplateKind.INSTRUCTION_GEN, sections)


def estimate_tokens(text: str) -> int:
    """Whitespace-split token estimate (x1.3), used when a backend reports no usage."""
    return math.ceil(len(text.split()) * 1.3)
