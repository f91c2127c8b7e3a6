import json

import pytest
from hypothesis import given, settings, strategies as st

from apcascade.catalog import (
    Catalog,
    LabeledCase,
    Product,
    ProductCategory,
    StructuredAttribute,
    catalog_records,
    dump_catalog,
    load_catalog,
    target_pairs,
    validate_catalog,
)
from apcascade.errors import IntegrityError, ParseError

from conftest import grid_catalog

MINIMAL = [
    {"kind": "pc", "id": "ws", "name": "walking stick", "definition": "A staff used for walking."},
    {"kind": "sa", "id": "bm", "name": "base material", "definition": "Material of the base.", "value_kind": "text"},
    {"kind": "product", "id": "p1", "pc_id": "ws", "title": "Wood stick", "description": "", "bullets": [], "sa_values": {"bm": "wood"}},
    {"kind": "case", "product_id": "p1", "sa_id": "bm", "test_value": "wood", "task": "correctness", "gold": "positive"},
]


def write(tmp_path, records, name="catalog.jsonl"):
    path = tmp_path / name
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def test_minimal_catalog_counts(tmp_path):
    cat = load_catalog(write(tmp_path, MINIMAL))
    assert cat.counts == (1, 1, 1, 1)
    assert not validate_catalog(cat)


def test_unknown_sa_in_case_names_the_id(tmp_path):
    records = MINIMAL[:3] + [dict(MINIMAL[3], sa_id="ghost")]
    with pytest.raises(IntegrityError, match="ghost") as err:
        load_catalog(write(tmp_path, records))
    assert err.value.ids == ("ghost",)


def test_duplicate_pc_reports_both_lines(tmp_path):
    records = [MINIMAL[0], MINIMAL[1], dict(MINIMAL[0], name="dup")] + MINIMAL[2:]
    with pytest.raises(IntegrityError) as err:
        load_catalog(write(tmp_path, records))
    assert err.value.lines == (1, 3)
    assert "1" in str(err.value) and "3" in str(err.value)


def test_malformed_line_has_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(MINIMAL[0]) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(ParseError) as err:
        load_catalog(path)
    assert err.value.line == 2


def test_missing_kind_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_catalog(write(tmp_path, [{"id": "x"}]))


def test_unknown_fields_counted(tmp_path, caplog):
    records = [dict(MINIMAL[0], colour="red", extra=1)] + MINIMAL[1:]
    cat = load_catalog(write(tmp_path, records))
    assert cat.unknown_fields == 2
    assert "2 unknown field" in caplog.text


def test_directory_of_files(tmp_path):
    (tmp_path / "data").mkdir()
    write(tmp_path / "data", MINIMAL[:2], "a.jsonl")
    write(tmp_path / "data", MINIMAL[2:], "b.jsonl")
    assert load_catalog(tmp_path / "data").counts == (1, 1, 1, 1)


def test_empty_catalog_loads_but_is_flagged(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    cat = load_catalog(path)
    assert cat.counts == (0, 0, 0, 0)
    assert validate_catalog(cat).by_kind()["EmptyCatalog"] == 1


def test_validation_missing_definition():
    cat = Catalog.build(
        [ProductCategory("ws", "walking stick", "")],
        [StructuredAttribute("bm", "base material", "Material.")],
        [Product("p1", "ws", "Stick")],
        [],
    )
    report = validate_catalog(cat)
    assert [v.kind for v in report.violations] == ["MissingDefinition"]


def test_validation_empty_title_and_unknown_pc_are_two_violations():
    cat = Catalog.build(
        [ProductCategory("ws", "walking stick", "A staff.")],
        [StructuredAttribute("bm", "base material", "Material.")],
        [Product("p1", "nope", "", "has a description")],
        [],
    )
    report = validate_catalog(cat)
    assert len(report) == 2
    assert report.by_kind() == {"DanglingReference": 1, "EmptyTitle": 1}


def test_target_pairs_dedup_and_order():
    pcs = [ProductCategory(i, i, "d") for i in "ab"]
    sas = [StructuredAttribute(i, i, "d") for i in "xy"]
    products = [Product("pa", "a", "t"), Product("pb", "b", "t")]
    cases = [
        LabeledCase("pb", "y", "v", "correctness", "positive"),
        LabeledCase("pa", "x", "v1", "correctness", "positive"),
        LabeledCase("pa", "x", "v2", "correctness", "negative"),
    ]
    cat = Catalog.build(pcs, sas, products, cases)
    assert target_pairs(cat) == [("a", "x"), ("b", "y")]
    assert target_pairs(Catalog.build(pcs, sas, products, [])) == []


def test_target_pairs_many_cases_per_pair():
    # many cases per pair collapse to the unique pairs: 30 pcs x 40 sas = 1200 pairs, 1350 cases
    cat = grid_catalog(30, 40)
    extra = [LabeledCase(c.product_id, c.sa_id, "again", c.task, c.gold, id=f"x{n}") for n, c in enumerate(cat.cases[:150])]
    cat = Catalog.build(cat.pcs.values(), cat.sas.values(), cat.products.values(), list(cat.cases) + extra)
    assert len(cat.cases) == 1350
    assert len(target_pairs(cat)) == 1200


def test_round_trip(tmp_path, toy_catalog):
    path = tmp_path / "rt.jsonl"
    dump_catalog(toy_catalog, path)
    again = load_catalog(path)
    assert again == toy_catalog
    dump_catalog(again, tmp_path / "rt2.jsonl")
    assert (tmp_path / "rt2.jsonl").read_bytes() == path.read_bytes()


@settings(max_examples=30, deadline=None)
@given(n_pc=st.integers(1, 6), n_sa=st.integers(1, 5), rnd=st.randoms(use_true_random=False))
def test_target_pairs_order_independent(n_pc, n_sa, rnd, tmp_path_factory):
    cat = grid_catalog(n_pc, n_sa)
    records = list(catalog_records(cat))
    rnd.shuffle(records)
    path = tmp_path_factory.mktemp("shuffled") / "c.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    shuffled = load_catalog(path)
    pairs = target_pairs(shuffled)
    assert pairs == target_pairs(cat)
    assert len(pairs) <= len(shuffled.cases)
    case_pairs = {shuffled.case_pair(c) for c in shuffled.cases}
    assert set(pairs) == case_pairs


def test_case_ids_do_not_depend_on_order():
    a = LabeledCase("p", "s", "v", "correctness", "positive")
    b = LabeledCase("p", "s", "v", "correctness", "positive")
    assert a.id == b.id == "correctness:p:s:v"
