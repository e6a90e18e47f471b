"""Concept vocabulary, the static validity grammar, and expansion enumeration.

A catalog is loaded from a YAML document with top-level keys ``domain``,
``max_depth_default``, ``anchor_nodes``, ``exclusion_groups`` and
``concepts``.  Each concept emits a *fragment*: a short list of graph
operations (``add_node``, ``add_edge``, ``set_attr``) replayed by
:mod:`failmode.scene` when an anchor graph is built.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

#: An unordered, duplicate-free collection of concept ids.
ConceptSet = frozenset


class CatalogError(ValueError):
    """Raised when a catalog document is malformed or inconsistent."""


class UnknownConceptError(KeyError):
    """Raised when a concept id is not part of the catalog."""


class Kind(str, enum.Enum):
    ENTITY = "entity"
    MODIFIER = "modifier"


@dataclass(frozen=True)
class AddNode:
    cls: str
    tags: frozenset[str] = frozenset()
    attrs: Mapping[str, Any] = field(default_factory=dict)
    name: str | None = None


@dataclass(frozen=True)
class AddEdge:
    src: str
    dst: str
    relation: str
    attrs: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class SetAttr:
    key: str
    value: Any
    target: str = "@bound"


FragmentOp = AddNode | AddEdge | SetAttr


@dataclass(frozen=True)
class AnchorNode:
    id: str
    cls: str
    tags: frozenset[str] = frozenset()
    attrs: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ConceptDef:
    id: str
    kind: Kind
    category: str
    description: str
    fragment: tuple[FragmentOp, ...]
    requires: frozenset[str] = frozenset()
    excludes_group: str | None = None
    params: Mapping[str, Any] = field(default_factory=dict)

    @property
    def is_modifier(self) -> bool:
        return self.kind is Kind.MODIFIER

    def produced_tags(self) -> frozenset[str]:
        """Tags carried by the nodes this concept adds (class names included)."""
        tags: set[str] = set()
        for op in self.fragment:
            if isinstance(op, AddNode):
                tags.add(op.cls)
                tags.update(op.tags)
        return frozenset(tags)


@dataclass(frozen=True)
class ValidityVerdict:
    violations: tuple[str, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.valid


@dataclass(frozen=True, eq=False)
class Catalog:
    domain: str
    concepts: Mapping[str, ConceptDef]
    exclusion_groups: Mapping[str, tuple[str, ...]]
    max_depth_default: int
    anchor_nodes: tuple[AnchorNode, ...] = ()
    backdrop_categories: frozenset[str] = frozenset()
    _validity_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def ids(self) -> tuple[str, ...]:
        """Concept ids in canonical (lexicographic) order."""
        return tuple(sorted(self.concepts))

    @property
    def categories(self) -> tuple[str, ...]:
        """Distinct concept categories, excluding scene-backdrop categories."""
        cats = {c.category for c in self.concepts.values()}
        return tuple(sorted(cats - self.backdrop_categories))

    def __getitem__(self, cid: str) -> ConceptDef:
        try:
            return self.concepts[cid]
        except KeyError:
            raise UnknownConceptError(cid) from None

    def __len__(self) -> int:
        return len(self.concepts)

    def entity_ids(self) -> tuple[str, ...]:
        return tuple(c for c in self.ids if not self.concepts[c].is_modifier)

    def modifier_ids(self) -> tuple[str, ...]:
        return tuple(c for c in self.ids if self.concepts[c].is_modifier)


def canonical_key(concepts: Iterable[str]) -> tuple[str, ...]:
    """Stable sorted serialization of a concept set."""
    return tuple(sorted(set(concepts)))


def set_label(concepts: Iterable[str]) -> str:
    return "{" + ", ".join(canonical_key(concepts)) + "}"


# -- loading -----------------------------------------------------------------


def _parse_op(raw: Mapping[str, Any], cid: str) -> FragmentOp:
    if not isinstance(raw, Mapping) or len(raw) != 1:
        raise CatalogError(f"{cid}: each fragment entry must be a single-key mapping")
    (op_name, body), = raw.items()
    body = dict(body or {})
    if op_name == "add_node":
        if "class" not in body:
            raise CatalogError(f"{cid}: add_node needs a class")
        return AddNode(
            cls=str(body["class"]),
            tags=frozenset(body.get("tags", ())),
            attrs=_freeze_attrs(body.get("attrs", {})),
            name=body.get("name"),
        )
    if op_name == "add_edge":
        for key in ("src", "dst", "relation"):
            if key not in body:
                raise CatalogError(f"{cid}: add_edge needs {key!r}")
        return AddEdge(
            src=str(body["src"]),
            dst=str(body["dst"]),
            relation=str(body["relation"]),
            attrs=_freeze_attrs(body.get("attrs", {})),
        )
    if op_name == "set_attr":
        if "key" not in body or "value" not in body:
            raise CatalogError(f"{cid}: set_attr needs key and value")
        return SetAttr(
            key=str(body["key"]),
            value=_freeze_value(body["value"]),
            target=str(body.get("target", "@bound")),
        )
    raise CatalogError(f"{cid}: unknown fragment op {op_name!r}")


def _freeze_value(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze_value(v) for v in value)
    if isinstance(value, Mapping):
        return {k: _freeze_value(v) for k, v in value.items()}
    return value


def _freeze_attrs(attrs: Mapping[str, Any]) -> dict[str, Any]:
    return {str(k): _freeze_value(v) for k, v in (attrs or {}).items()}


def _parse_concept(raw: Mapping[str, Any]) -> ConceptDef:
    try:
        cid = str(raw["id"])
    except (KeyError, TypeError):
        raise CatalogError("concept record without an id") from None
    try:
        kind = Kind(str(raw.get("kind", "entity")).lower())
    except ValueError:
        raise CatalogError(f"{cid}: kind must be 'entity' or 'modifier'") from None
    fragment = tuple(_parse_op(op, cid) for op in raw.get("fragment") or ())
    adds = sum(isinstance(op, AddNode) for op in fragment)
    if kind is Kind.MODIFIER and adds:
        raise CatalogError(f"{cid}: a modifier may not add nodes")
    if kind is Kind.ENTITY and not adds:
        raise CatalogError(f"{cid}: an entity must add at least one node")
    group = raw.get("excludes_group")
    if isinstance(group, list):
        raise CatalogError(f"{cid}: at most one exclusion group per concept")
    params = {str(k): _freeze_value(v) for k, v in (raw.get("params") or {}).items()}
    return ConceptDef(
        id=cid,
        kind=kind,
        category=str(raw.get("category", "")),
        description=str(raw.get("description", "")),
        fragment=fragment,
        requires=frozenset(raw.get("requires") or ()),
        excludes_group=str(group) if group is not None else None,
        params=params,
    )


def load_catalog(source: str | Mapping[str, Any]) -> Catalog:
    """Build a :class:`Catalog` from YAML text (or an already-parsed mapping)."""
    if isinstance(source, Mapping):
        doc = source
    else:
        try:
            doc = yaml.safe_load(source)
        except yaml.YAMLError as exc:
            raise CatalogError(f"parse error: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise CatalogError("parse error: catalog document must be a mapping")

    raw_concepts = doc.get("concepts") or []
    if not raw_concepts:
        raise CatalogError("empty catalog")

    concepts: dict[str, ConceptDef] = {}
    for raw in raw_concepts:
        cdef = _parse_concept(raw)
        if cdef.id in concepts:
            raise CatalogError(f"duplicate id {cdef.id!r}")
        concepts[cdef.id] = cdef

    groups = {
        str(g): tuple(str(m) for m in members)
        for g, members in (doc.get("exclusion_groups") or {}).items()
    }
    for g, members in groups.items():
        for mid in members:
            if mid not in concepts:
                raise CatalogError(f"exclusion group {g!r} lists unknown concept {mid!r}")
            if concepts[mid].excludes_group != g:
                raise CatalogError(f"{mid}: listed in group {g!r} but declares {concepts[mid].excludes_group!r}")
    for cdef in concepts.values():
        if cdef.excludes_group is not None and cdef.excludes_group not in groups:
            raise CatalogError(f"{cdef.id}: unknown exclusion group {cdef.excludes_group!r}")

    producible: set[str] = set()
    for cdef in concepts.values():
        if not cdef.is_modifier:
            producible |= cdef.produced_tags()
    for cdef in concepts.values():
        missing = cdef.requires - producible
        if missing:
            raise CatalogError(f"{cdef.id}: dangling requires tag(s) {sorted(missing)}")

    anchors = tuple(
        AnchorNode(
            id=str(a["id"]),
            cls=str(a.get("class", a["id"])),
            tags=frozenset(a.get("tags") or ()),
            attrs=_freeze_attrs(a.get("attrs") or {}),
        )
        for a in doc.get("anchor_nodes") or ()
    )
    for a in anchors:
        if a.id in concepts:
            raise CatalogError(f"anchor node id {a.id!r} collides with a concept id")
    max_depth = int(doc.get("max_depth_default", 5))
    if max_depth < 1:
        raise CatalogError("max_depth_default must be positive")
    return Catalog(
        domain=str(doc.get("domain", "custom")),
        concepts=concepts,
        exclusion_groups=groups,
        max_depth_default=max_depth,
        anchor_nodes=anchors,
        backdrop_categories=frozenset(doc.get("backdrop_categories") or ()),
    )


def load_catalog_file(path: str | Path) -> Catalog:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"catalog not found: {path}")
    return load_catalog(path.read_text(encoding="utf-8"))


def bundled_catalog(domain: str) -> Catalog:
    """Load one of the catalogs shipped with the package (driving, indoor, synthetic)."""
    from importlib import resources

    text = resources.files("failmode.data").joinpath(f"{domain}_catalog.yaml").read_text("utf-8")
    return load_catalog(text)


# -- validity ----------------------------------------------------------------


def _resolve(catalog: Catalog, concepts: Iterable[str]) -> frozenset[str]:
    ids = frozenset(concepts)
    for cid in ids:
        if cid not in catalog.concepts:
            raise UnknownConceptError(cid)
    return ids


def check_validity(catalog: Catalog, concepts: Iterable[str], max_depth: int | None = None) -> ValidityVerdict:
    """Static validity of a concept set; never renders anything.

    A set is valid when it is nonempty, holds at least one entity, has no two
    members in one exclusion group, respects the depth bound, and every
    modifier/prerequisite binds under the canonical replay of
    :func:`failmode.scene.plan_composition`.
    """
    ids = _resolve(catalog, concepts)
    depth = catalog.max_depth_default if max_depth is None else max_depth
    cache_key = (ids, depth)
    cached = catalog._validity_cache.get(cache_key)
    if cached is not None:
        return cached

    violations: list[str] = []
    if not ids:
        violations.append("empty set")
    else:
        if all(catalog.concepts[c].is_modifier for c in ids):
            violations.append("modifier-only set")
        seen: dict[str, str] = {}
        for cid in sorted(ids):
            group = catalog.concepts[cid].excludes_group
            if group is None:
                continue
            if group in seen:
                msg = f"exclusion group {group}"
                if msg not in violations:
                    violations.append(msg)
            else:
                seen[group] = cid
        if len(ids) > depth:
            violations.append(f"depth {len(ids)} exceeds max depth {depth}")
        if not violations:
            from .scene import CompositionError, plan_composition

            try:
                plan_composition(catalog, ids)
            except CompositionError as exc:
                violations.append(str(exc))

    verdict = ValidityVerdict(tuple(violations))
    catalog._validity_cache[cache_key] = verdict
    return verdict


def is_valid(catalog: Catalog, concepts: Iterable[str], max_depth: int | None = None) -> bool:
    return check_validity(catalog, concepts, max_depth).valid


def enumerate_expansions(catalog: Catalog, concepts: Iterable[str], max_depth: int | None = None) -> list[frozenset[str]]:
    """Every valid one-concept extension of ``concepts``, in canonical id order."""
    base = _resolve(catalog, concepts)
    depth = catalog.max_depth_default if max_depth is None else max_depth
    if len(base) >= depth:
        return []
    cache_key = ("expansions", base, depth)
    cached = catalog._validity_cache.get(cache_key)
    if cached is None:
        cached = tuple(
            base | {cid}
            for cid in catalog.ids
            if cid not in base and check_validity(catalog, base | {cid}, depth).valid
        )
        catalog._validity_cache[cache_key] = cached
    return list(cached)


def enumerate_valid_sets(catalog: Catalog, max_depth: int | None = None, limit: int | None = None) -> list[frozenset[str]]:
    """All valid sets up to ``max_depth``, level by level (for small catalogs and tests)."""
    depth = catalog.max_depth_default if max_depth is None else max_depth
    level: set[frozenset[str]] = {frozenset()}
    out: list[frozenset[str]] = []
    for _ in range(depth):
        nxt: set[frozenset[str]] = set()
        for s in level:
            nxt.update(enumerate_expansions(catalog, s, depth))
        out.extend(sorted(nxt, key=canonical_key))
        if limit is not None and len(out) >= limit:
            return out[:limit]
        level = nxt
        if not level:
            break
    return out
