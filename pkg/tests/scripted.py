"""Scripted mock behaviours shared by the test modules."""

from __future__ import annotations

import re

from apcascade.gateway import LlmRequest

STICK_T1 = (
    "A base material for a walking stick refers to the primary material used to construct the base of the "
    "walking stick, which is typically wood, aluminum, carbon fiber, or other sturdy materials."
)
STICK_T2 = (
    "Base material refers to the material that makes up the bottom part of a walking stick, which comes into "
    "contact with the ground and provides stability and traction when using the stick."
)
PET_AGE = (
    "Age range indicates the intended or appropriate age group for which the pet food product is suitable. "
    "Pet food is designed to provide proper nutrition for animals at different life stages, and the age range "
    "helps ensure that the product meets the specific dietary needs of pets based on their age."
)

_TARGET = re.compile(
    r"### Target:.*?Product category definition: ([^\n]*)\nAttribute definition: ([^\n]*)", re.S
)
_VALUE = re.compile(r"test value (?:for '[^']*' is|of the attribute '[^']*':) '([^']*)'")
_LEVEL = re.compile(r"\[level-(\d+)\]")


def target_of(prompt: str) -> tuple[str, str]:
    m = _TARGET.search(prompt)
    assert m, "instruction prompt without a Target section"
    return m.group(1), m.group(2)


def value_of(prompt: str) -> str:
    m = _VALUE.search(prompt)
    assert m, "classification prompt without a test value"
    return m.group(1)


def product_text(prompt: str) -> str:
    start = prompt.index("Title:")
    end = prompt.index("Structured attributes:", start)
    return prompt[start:end]


def toy_generation(request: LlmRequest) -> str:
    """Instruction generator for the walking-stick / pet-food toy catalog."""
    pc_def, sa_def = target_of(request.prompt)
    if pc_def.startswith("A walking stick") and "primary material" in sa_def:
        # the refined text needs generated (not human) examples, i.e. iteration >= 2
        examples = request.prompt.split("### Target:")[0]
        text = STICK_T2 if "[gen]" in examples else STICK_T1
        return f"instruction: {text} [gen]"
    if pc_def.startswith("Pet food") and "age group" in sa_def:
        return f"instruction: {PET_AGE} [gen]"
    return f"instruction: Read '{sa_def[:40]}' literally for this category. [gen]"


def toy_classification(request: LlmRequest) -> str:
    """Keyword-scripted auditor; instruction-aware only through instruction keywords."""
    p = request.prompt
    value = value_of(p)
    has_instruction = "### Instruction:" in p
    if has_instruction and "comes into contact with the ground" in p and "rubber tip" in p:
        return (
            "reasoning: The product data mentions a 'metal-reinforced removable rubber tip cover' for the walking "
            "stick, which implies that the base material that comes into contact with the ground is rubber.\n"
            "prediction: Correct"
        )
    if has_instruction and "life stage" in p and value == "young adult":
        return (
            "reasoning: The title and the bullet points mention 'puppy' and 'rapidly growing puppies'; "
            "'Young Adult' refers to a different life stage.\nprediction: Incorrect"
        )
    if "Huangtang wood" in p and "'base material'" in p:
        return (
            "reasoning: The product data mentions 'Huangtang wood' and a 'steel spike'. There is no mention of "
            "the walking stick being made of rubber material.\nprediction: Incorrect"
        )
    if "Growing Puppies" in p and value == "young adult":
        return (
            "reasoning: The product data does not contain any information about the intended age range.\n"
            "prediction: Correct"
        )
    found = value.lower() in product_text(p).lower()
    label = "Correct" if found else "Incorrect"
    return f"reasoning: The value '{value}' is {'' if found else 'not '}stated in the product data.\nprediction: {label}"


def level_generation(request: LlmRequest) -> str:
    """Each generation is one specificity level above its most specific few-shot."""
    levels = [int(x) for x in _LEVEL.findall(request.prompt.split("### Target:")[0])]
    pc_def, sa_def = target_of(request.prompt)
    return f"instruction: Guidance [level-{max(levels) + 1}] for {pc_def[:20]} / {sa_def[:20]}."


def level_skill(level: int | None, value: str) -> str:
    """Oracle of the level classifier: which label it gives a test value at a given level.

    Test values are ``ok-<n>`` (gold positive) or ``bad-<n>`` (gold negative).
    No instruction: misses every bad value. Level 1: catches even-numbered
    bad values. Level 2: catches all. Level 3+: catches all but also flags
    every third ok value.
    """
    kind, n = value.split("-")
    n = int(n)
    if level is None or level == 0:
        flagged = False
    elif level == 1:
        flagged = kind == "bad" and n % 2 == 0
    elif level == 2:
        flagged = kind == "bad"
    else:
        flagged = kind == "bad" or n % 3 == 0
    return "Incorrect" if flagged else "Correct"


def level_classification(request: LlmRequest) -> str:
    p = request.prompt
    level = None
    if "### Instruction:" in p:
        instr = p.split("### Instruction:")[1]
        found = _LEVEL.findall(instr)
        level = int(found[0]) if found else None
    return f"reasoning: scripted at level {level}.\nprediction: {level_skill(level, value_of(p))}"
