import pytest

from trinity.data_model import (
    Catalog,
    DataClass,
    EntitySchema,
    FieldDef,
    Kind,
    Variant,
    compile_dictionary,
)
from trinity.values import Scalar


def structured(entity, fields, pk, **kw) -> EntitySchema:
    defs = tuple(
        f if isinstance(f, FieldDef) else FieldDef(f[0], Scalar(f[1]), len(f) > 2 and f[2])
        for f in fields
    )
    return EntitySchema(entity, DataClass(Kind.STRUCTURED), defs, tuple(pk), **kw)


def unstructured(entity, variant: Variant, **kw) -> EntitySchema:
    return EntitySchema(entity, DataClass(Kind.UNSTRUCTURED, variant), **kw)


def orders_schema() -> EntitySchema:
    return structured(
        "orders",
        [("id", "Int64"), ("amount", "Int64"), ("region", "Text"), ("cust", "Text", True)],
        ["id"],
        acid_required=True,
    )


def accounts_schema() -> EntitySchema:
    return structured("accounts", [("id", "Int64"), ("balance", "Int64")], ["id"])


@pytest.fixture
def catalog():
    return Catalog(compile_dictionary([orders_schema(), accounts_schema()]))


# Acceptance outcomes, filled in by test_acceptance and echoed after the run.
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
