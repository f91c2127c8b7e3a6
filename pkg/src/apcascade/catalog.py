"""Catalog records (categories, attributes, products, labeled cases) and JSONL I/O.

A dataset is newline-delimited JSON where each record carries a ``kind``
discriminator: ``pc``, ``sa``, ``product`` or ``case``. A dataset may be a
single file or a directory of ``*.jsonl`` files (read in name order).
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Iterator, Mapping

from apcascade.errors import IntegrityError, ParseError

log = logging.getLogger(__name__)

TASKS = ("correctness", "applicability")
VALUE_KINDS = ("text", "numeric")
GOLD_VALUES = ("positive", "negative")


@dataclass(frozen=True)
class ProductCategory:
    id: str
    name: str
    definition: str


@dataclass(frozen=True)
class StructuredAttribute:
    id: str
    name: str
    definition: str
    value_kind: str = "text"


@dataclass(frozen=True)
class Product:
    id: str
    pc_id: str
    title: str
    description: str = ""
    bullets: tuple[str, ...] = ()
    sa_values: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "bullets", tuple(self.bullets))
        object.__setattr__(self, "sa_values", MappingProxyType(dict(self.sa_values)))

    def __hash__(self) -> int:
        return hash((self.id, self.pc_id, self.title))


@dataclass(frozen=True)
class LabeledCase:
    product_id: str
    sa_id: str
    test_value: str
    task: str
    gold: str
    language: str = "en"
    id: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            object.__setattr__(self, "id", default_case_id(self))


def default_case_id(case: LabeledCase) -> str:
    # content-derived so that record order in the file never changes ids
    return f"{case.task}:{case.product_id}:{case.sa_id}:{case.test_value}"


@dataclass(frozen=True)
class Catalog:
    pcs: Mapping[str, ProductCategory] = field(default_factory=dict)
    sas: Mapping[str, StructuredAttribute] = field(default_factory=dict)
    products: Mapping[str, Product] = field(default_factory=dict)
    cases: tuple[LabeledCase, ...] = ()
    unknown_fields: int = 0

    def __post_init__(self) -> None:
        for name in ("pcs", "sas", "products"):
            object.__setattr__(self, name, MappingProxyType(dict(getattr(self, name))))
        object.__setattr__(self, "cases", tuple(self.cases))

    @classmethod
    def build(
        cls,
        pcs: Iterable[ProductCategory] = (),
        sas: Iterable[StructuredAttribute] = (),
        products: Iterable[Product] = (),
        cases: Iterable[LabeledCase] = (),
    ) -> "Catalog":
        return cls(
            pcs={p.id: p for p in pcs},
            sas={s.id: s for s in sas},
            products={p.id: p for p in products},
            cases=tuple(cases),
        )

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return len(self.pcs), len(self.sas), len(self.products), len(self.cases)

    def case_pair(self, case: LabeledCase) -> tuple[str, str]:
        return self.products[case.product_id].pc_id, case.sa_id

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Catalog):
            return NotImplemented
        return (
            dict(self.pcs) == dict(other.pcs)
            and dict(self.sas) == dict(other.sas)
            and {k: _product_dict(v) for k, v in self.products.items()}
            == {k: _product_dict(v) for k, v in other.products.items()}
            and self.cases == other.cases
        )

    __hash__ = None  # type: ignore[assignment]


_FIELDS: dict[str, tuple[str, ...]] = {
    "pc": ("id", "name", "definition"),
    "sa": ("id", "name", "definition", "value_kind"),
    "product": ("id", "pc_id", "title", "description", "bullets", "sa_values"),
    "case": ("id", "product_id", "sa_id", "test_value", "task", "gold", "language"),
}
_REQUIRED: dict[str, tuple[str, ...]] = {
    "pc": ("id",),
    "sa": ("id",),
    "product": ("id", "pc_id"),
    "case": ("product_id", "sa_id", "test_value", "task", "gold"),
}


def _iter_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix == ".jsonl")
    return [path]


def _iter_records(path: Path) -> Iterator[tuple[str, int, dict[str, Any]]]:
    for file in _iter_files(path):
        with file.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{file}:{lineno}: invalid JSON ({exc.msg})", lineno, str(file)) from exc
                if not isinstance(rec, dict):
                    raise ParseError(f"{file}:{lineno}: record is not an object", lineno, str(file))
                yield str(file), lineno, rec


def _str_field(rec: dict, key: str, where: str, lineno: int, source: str) -> str:
    value = rec.get(key, "")
    if not isinstance(value, str):
        raise ParseError(f"{where}: field {key!r} must be a string", lineno, source)
    return value


def load_catalog(path: str | Path) -> Catalog:
    """Load and link a catalog; raises on malformed records or dangling references."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)

    pcs: dict[str, ProductCategory] = {}
    sas: dict[str, StructuredAttribute] = {}
    products: dict[str, Product] = {}
    cases: list[LabeledCase] = []
    seen: dict[tuple[str, str], tuple[str, int]] = {}
    case_lines: list[tuple[str, int]] = []
    unknown = 0

    for source, lineno, rec in _iter_records(path):
        where = f"{source}:{lineno}"
        kind = rec.get("kind")
        if kind not in _FIELDS:
            raise ParseError(f"{where}: unknown or missing kind {kind!r}", lineno, source)
        for key in _REQUIRED[kind]:
            if key not in rec:
                raise ParseError(f"{where}: {kind} record missing {key!r}", lineno, source)
        unknown += sum(1 for k in rec if k != "kind" and k not in _FIELDS[kind])
        s = lambda key: _str_field(rec, key, where, lineno, source)  # noqa: E731

        if kind == "case":
            task, gold = s("task"), s("gold")
            if task not in TASKS:
                raise ParseError(f"{where}: task must be one of {TASKS}", lineno, source)
            if gold not in GOLD_VALUES:
                raise ParseError(f"{where}: gold must be one of {GOLD_VALUES}", lineno, source)
            case = LabeledCase(
                product_id=s("product_id"),
                sa_id=s("sa_id"),
                test_value=s("test_value"),
                task=task,
                gold=gold,
                language=s("language") or "en",
                id=s("id"),
            )
            key = ("case", case.id)
            if key in seen:
                first = seen[key]
                raise IntegrityError(
                    f"duplicate case id {case.id!r} at lines {first[1]} and {lineno}",
                    ids=(case.id,),
                    lines=(first[1], lineno),
                )
            seen[key] = (source, lineno)
            cases.append(case)
            case_lines.append((source, lineno))
            continue

        rid = s("id")
        if not rid:
            raise ParseError(f"{where}: empty id", lineno, source)
        key = (kind, rid)
        if key in seen:
            first = seen[key]
            raise IntegrityError(
                f"duplicate {kind} id {rid!r} at lines {first[1]} and {lineno}",
                ids=(rid,),
                lines=(first[1], lineno),
            )
        seen[key] = (source, lineno)

        if kind == "pc":
            pcs[rid] = ProductCategory(rid, s("name") or rid, s("definition"))
        elif kind == "sa":
            value_kind = s("value_kind") or "text"
            if value_kind not in VALUE_KINDS:
                raise ParseError(f"{where}: value_kind must be one of {VALUE_KINDS}", lineno, source)
            sas[rid] = StructuredAttribute(rid, s("name") or rid, s("definition"), value_kind)
        else:
            bullets = rec.get("bullets", [])
            sa_values = rec.get("sa_values", {})
            if not isinstance(bullets, list) or not all(isinstance(b, str) for b in bullets):
                raise ParseError(f"{where}: bullets must be a list of strings", lineno, source)
            if not isinstance(sa_values, dict):
                raise ParseError(f"{where}: sa_values must be an object", lineno, source)
            products[rid] = Product(
                id=rid,
                pc_id=s("pc_id"),
                title=s("title"),
                description=s("description"),
                bullets=tuple(bullets),
                sa_values={str(k): str(v) for k, v in sa_values.items()},
            )

    for product in products.values():
        if product.pc_id not in pcs:
            raise IntegrityError(
                f"product {product.id!r} references unknown pc_id {product.pc_id!r}", ids=(product.pc_id,)
            )
        for sa_id in product.sa_values:
            if sa_id not in sas:
                raise IntegrityError(
                    f"product {product.id!r} references unknown sa_id {sa_id!r}", ids=(sa_id,)
                )
    for case, (_, lineno) in zip(cases, case_lines):
        if case.product_id not in products:
            raise IntegrityError(
                f"case at line {lineno} references unknown product_id {case.product_id!r}",
                ids=(case.product_id,),
                lines=(lineno,),
            )
        if case.sa_id not in sas:
            raise IntegrityError(
                f"case at line {lineno} references unknown sa_id {case.sa_id!r}",
                ids=(case.sa_id,),
                lines=(lineno,),
            )

    if unknown:
        log.warning("ignored %d unknown field(s) while loading %s", unknown, path)
    catalog = Catalog(pcs=pcs, sas=sas, products=products, cases=tuple(cases), unknown_fields=unknown)
    log.info("loaded catalog: pcs=%d sas=%d products=%d cases=%d", *catalog.counts)
    return catalog


def _product_dict(p: Product) -> dict[str, Any]:
    return {
        "id": p.id,
        "pc_id": p.pc_id,
        "title": p.title,
        "description": p.description,
        "bullets": list(p.bullets),
        "sa_values": dict(p.sa_values),
    }


def catalog_records(catalog: Catalog) -> Iterator[dict[str, Any]]:
    for pc in catalog.pcs.values():
        yield {"kind": "pc", "id": pc.id, "name": pc.name, "definition": pc.definition}
    for sa in catalog.sas.values():
        yield {
            "kind": "sa",
            "id": sa.id,
            "name": sa.name,
            "definition": sa.definition,
            "value_kind": sa.value_kind,
        }
    for product in catalog.products.values():
        yield {"kind": "product", **_product_dict(product)}
    for case in catalog.cases:
        yield {
            "kind": "case",
            "id": case.id,
            "product_id": case.product_id,
            "sa_id": case.sa_id,
            "test_value": case.test_value,
            "task": case.task,
            "gold": case.gold,
            "language": case.language,
        }


def dump_catalog(catalog: Catalog, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in catalog_records(catalog):
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class Violation:
    kind: str
    ref: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def by_kind(self) -> Counter:
        return Counter(v.kind for v in self.violations)


def validate_catalog(catalog: Catalog) -> ValidationReport:
    """Collect every data-quality violation; never raises."""
    report = ValidationReport()
    add = lambda kind, ref, msg: report.violations.append(Violation(kind, ref, msg))  # noqa: E731

    if not any(catalog.counts):
        add("EmptyCatalog", "", "catalog has no records")
    for pc in catalog.pcs.values():
        if not pc.definition.strip():
            add("MissingDefinition", pc.id, f"product category {pc.id!r} has an empty definition")
    for sa in catalog.sas.values():
        if not sa.definition.strip():
            add("MissingDefinition", sa.id, f"attribute {sa.id!r} has an empty definition")
        if sa.value_kind not in VALUE_KINDS:
            add("InvalidValueKind", sa.id, f"attribute {sa.id!r} has value_kind {sa.value_kind!r}")
    for product in catalog.products.values():
        if product.pc_id not in catalog.pcs:
            add("DanglingReference", product.id, f"product {product.id!r} -> unknown pc {product.pc_id!r}")
        if not product.title.strip():
            add("EmptyTitle", product.id, f"product {product.id!r} has an empty title")
        if not (product.title.strip() or product.description.strip() or any(b.strip() for b in product.bullets)):
            add("EmptyUnstructured", product.id, f"product {product.id!r} has no unstructured data")
        for sa_id in product.sa_values:
            if sa_id not in catalog.sas:
                add("DanglingReference", product.id, f"product {product.id!r} -> unknown sa {sa_id!r}")
    for case in catalog.cases:
        if case.product_id not in catalog.products:
            add("DanglingReference", case.id, f"case {case.id!r} -> unknown product {case.product_id!r}")
        if case.sa_id not in catalog.sas:
            add("DanglingReference", case.id, f"case {case.id!r} -> unknown sa {case.sa_id!r}")
        if case.task not in TASKS:
            add("InvalidTask", case.id, f"case {case.id!r} has task {case.task!r}")
        if case.gold not in GOLD_VALUES:
            add("InvalidGold", case.id, f"case {case.id!r} has gold {case.gold!r}")
        if not case.test_value.strip():
            add("EmptyTestValue", case.id, f"case {case.id!r} has an empty test value")
    return report


def target_pairs(catalog: Catalog, cases: Iterable[LabeledCase] | None = None) -> list[tuple[str, str]]:
    """Unique (pc_id, sa_id) pairs of the labeled cases, sorted."""
    cases = catalog.cases if cases is None else cases
    return sorted({catalog.case_pair(c) for c in cases})
