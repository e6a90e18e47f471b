from __future__ import annotations

from fractions import Fraction

import pytest

from failmode.catalog import bundled_catalog, load_catalog
from failmode.evaluator import EvalRecord
from failmode.oracle import bundled_oracle

# A small catalog exercising every fragment feature: prerequisites, modifiers,
# exclusion groups, parameterized attributes and edge targets.
TOY_CATALOG = """
domain: toy
max_depth_default: 4
anchor_nodes:
  - {id: room, class: room, tags: [scene]}
exclusion_groups:
  lamp_state: [lamp_on, lamp_off]
  size: [big, small]
concepts:
  - id: table
    kind: entity
    category: furniture
    description: A wooden table.
    fragment:
      - add_node: {class: table, tags: [surface, placeable]}
      - add_edge: {src: '@self', dst: room, relation: in}
  - id: cup
    kind: entity
    category: objects
    description: A cup on the table.
    requires: [surface]
    fragment:
      - add_node: {class: cup, tags: [container, placeable]}
      - add_edge: {src: '@self', dst: '@req:surface', relation: 'on'}
  - id: lamp_on
    kind: entity
    category: lighting
    description: A lit lamp.
    excludes_group: lamp_state
    fragment:
      - add_node: {class: lamp, tags: [light], attrs: {state: 'on'}}
  - id: lamp_off
    kind: entity
    category: lighting
    description: A dark lamp.
    excludes_group: lamp_state
    fragment:
      - add_node: {class: lamp, tags: [light], attrs: {state: 'off'}}
  - id: big
    kind: modifier
    category: size
    description: It is big.
    requires: [placeable]
    excludes_group: size
    fragment:
      - set_attr: {key: size, value: big}
  - id: small
    kind: modifier
    category: size
    description: It is small.
    requires: [placeable]
    excludes_group: size
    fragment:
      - set_attr: {key: size, value: small}
  - id: far_away
    kind: modifier
    category: placement
    description: It is far away.
    requires: [placeable]
    params: {distance: {low: 10, high: 20}}
    fragment:
      - set_attr: {key: distance, value: $distance}
"""


@pytest.fixture(scope="session")
def toy_catalog():
    return load_catalog(TOY_CATALOG)


@pytest.fixture(scope="session")
def driving_catalog():
    return bundled_catalog("driving")


@pytest.fixture(scope="session")
def indoor_catalog():
    return bundled_catalog("indoor")


@pytest.fixture(scope="session")
def synthetic_catalog():
    return bundled_catalog("synthetic")


@pytest.fixture(scope="session")
def driving_oracle():
    return bundled_oracle("driving")


@pytest.fixture(scope="session")
def indoor_oracle():
    return bundled_oracle("indoor")


@pytest.fixture(scope="session")
def synthetic_oracle():
    return bundled_oracle("synthetic")


def record(concepts, failures: int, m: int = 5, phase: str = "search") -> EvalRecord:
    """Hand-made record for metric and selection fixtures."""
    concepts = frozenset([concepts] if isinstance(concepts, str) else concepts)
    return EvalRecord(concepts, m, failures, ("",) * m, 0, "A", (), (), phase)


def frac(x) -> Fraction:
    return Fraction(x)


# -- acceptance reporting ----------------------------------------------------------

#: criterion number -> list of (part name, passed, detail)
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        ok = all(p for _, p, _ in parts)
        detail = "; ".join(f"{name}: {d}" if name else d for name, _, d in parts)
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {detail}")
