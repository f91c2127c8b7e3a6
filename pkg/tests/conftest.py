from __future__ import annotations

from pathlib import Path

import pytest

from apcascade.cascade import Instruction, SeedSet
from apcascade.catalog import Catalog, LabeledCase, Product, ProductCategory, StructuredAttribute, load_catalog
from apcascade.gateway import Gateway, MockBackend

FIXTURES = Path(__file__).parent / "fixtures"
TOY = FIXTURES / "toy"
GOLDEN = FIXTURES / "golden"


def grid_catalog(n_pc: int, n_sa: int, *, neg_every: int = 3, cases_per_pair: int = 1) -> Catalog:
    """Full cross product of n_pc categories and n_sa attributes, one product per pair.

    Test values are ``ok-<n>`` / ``bad-<n>``; every ``neg_every``-th case is negative.
    """
    pcs = [ProductCategory(f"pc{i:02d}", f"category {i}", f"Definition of category {i}.") for i in range(n_pc)]
    sas = [StructuredAttribute(f"sa{j:02d}", f"attribute {j}", f"Definition of attribute {j}.") for j in range(n_sa)]
    products, cases = [], []
    n = 0
    for pc in pcs:
        for sa in sas:
            pid = f"prod-{pc.id}-{sa.id}"
            products.append(Product(pid, pc.id, f"Product for {pc.name}", "Some description.", ("bullet",), {}))
            for _ in range(cases_per_pair):
                negative = n % neg_every == 0
                value = f"{'bad' if negative else 'ok'}-{n}"
                cases.append(
                    LabeledCase(pid, sa.id, value, "correctness", "negative" if negative else "positive", id=f"case{n:05d}")
                )
                n += 1
    return Catalog.build(pcs, sas, products, cases)


def grid_seeds(catalog: Catalog, m: int, marker: str = "") -> SeedSet:
    """m human seeds over distinct attributes (padding with extra seed-only attributes)."""
    instrs, defs = [], {}
    sa_ids = sorted(catalog.sas)
    pc_ids = sorted(catalog.pcs)
    for k in range(m):
        sa_id = sa_ids[k] if k < len(sa_ids) else f"seed-sa{k}"
        pc_id = pc_ids[k % len(pc_ids)]
        instrs.append(Instruction(pc_id, sa_id, f"Human seed {k} {marker}".strip()))
        if sa_id not in catalog.sas:
            defs[(pc_id, sa_id)] = (catalog.pcs[pc_id].definition, f"Seed-only attribute {k}.")
    return SeedSet(tuple(instrs), defs)


@pytest.fixture(scope="session")
def toy_catalog() -> Catalog:
    return load_catalog(TOY / "catalog.jsonl")


@pytest.fixture
def mock_gateway():
    def make(script=None, rules=(), default=None, **kw) -> Gateway:
        return Gateway(MockBackend(rules, default=default, script=script), **kw)

    return make


# one line per acceptance criterion, printed after the run regardless of capture
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
