"""Anchor scene graphs: replaying a concept set into nodes, edges and attributes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .catalog import AddEdge, AddNode, Catalog, ConceptDef, SetAttr, UnknownConceptError

ANCHOR = "<anchor>"


class CompositionError(ValueError):
    """A composition cannot be replayed into a scene graph."""


class BindingError(CompositionError):
    """A modifier or prerequisite found no compatible node."""


@dataclass
class Node:
    cls: str
    tags: frozenset[str]
    attrs: dict[str, Any] = field(default_factory=dict)


@dataclass
class Edge:
    src: str
    dst: str
    relation: str
    attrs: dict[str, Any] = field(default_factory=dict)


@dataclass
class SceneGraph:
    """Nodes keyed by id (insertion ordered), directed labeled edges, provenance.

    ``provenance`` maps node ids, ``edge:<i>`` keys and ``<node>.<attr>``
    override keys to the concept id that produced them.
    """

    nodes: dict[str, Node] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)
    provenance: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "SceneGraph":
        # attribute values are immutable (scalars / tuples), so one level suffices
        return SceneGraph(
            {k: Node(n.cls, n.tags, dict(n.attrs)) for k, n in self.nodes.items()},
            [Edge(e.src, e.dst, e.relation, dict(e.attrs)) for e in self.edges],
            dict(self.provenance),
        )

    def nodes_with_tag(self, tag: str) -> list[str]:
        return [nid for nid, n in self.nodes.items() if tag in n.tags or n.cls == tag]

    def to_dict(self) -> dict[str, Any]:
        return {
            "nodes": {
                nid: {"class": n.cls, "tags": sorted(n.tags), "attrs": _plain(n.attrs)}
                for nid, n in self.nodes.items()
            },
            "edges": [
                {"src": e.src, "dst": e.dst, "relation": e.relation, "attrs": _plain(e.attrs)}
                for e in self.edges
            ],
            "provenance": dict(self.provenance),
        }


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class Composition:
    """Ordered derivation: ``(concept id, bound node id or None)`` per step."""

    steps: tuple[tuple[str, str | None], ...] = ()

    @property
    def concept_ids(self) -> tuple[str, ...]:
        return tuple(cid for cid, _ in self.steps)


def canonical_set(comp: Composition | Iterable[str]) -> frozenset[str]:
    ids = comp.concept_ids if isinstance(comp, Composition) else comp
    return frozenset(ids)


def anchor_graph(catalog: Catalog) -> SceneGraph:
    g = SceneGraph()
    for a in catalog.anchor_nodes:
        g.nodes[a.id] = Node(a.cls, frozenset(a.tags) | {a.cls}, dict(a.attrs))
        g.provenance[a.id] = ANCHOR
    return g


def _node_ids_for(cdef: ConceptDef) -> list[str]:
    adds = [op for op in cdef.fragment if isinstance(op, AddNode)]
    if len(adds) == 1 and adds[0].name is None:
        return [cdef.id]
    return [f"{cdef.id}/{op.name or i}" for i, op in enumerate(adds)]


def _most_recent(graph: SceneGraph, tags: frozenset[str], skip: Iterable[str] = ()) -> str | None:
    for nid in reversed(graph.nodes):
        if graph.provenance.get(nid) == ANCHOR or nid in skip:
            continue
        node = graph.nodes[nid]
        if tags <= (node.tags | {node.cls}):
            return nid
    return None


def _resolve_param(cdef: ConceptDef, value: Any) -> Any:
    if isinstance(value, str) and value.startswith("$"):
        name = value[1:]
        if name not in cdef.params:
            raise CompositionError(f"{cdef.id}: unknown parameter {name!r}")
        value = cdef.params[name]
    if isinstance(value, Mapping) and set(value) == {"low", "high"}:
        return (float(value["low"]), float(value["high"]))
    return value


def _resolve_ref(graph: SceneGraph, ref: str, own: list[str], binding: str | None, cdef: ConceptDef) -> str:
    if ref == "@self":
        if not own:
            raise CompositionError(f"{cdef.id}: @self used by a fragment that adds no node")
        return own[0]
    if ref.startswith("@self:"):
        name = f"{cdef.id}/{ref[6:]}"
        if name not in own:
            raise CompositionError(f"{cdef.id}: no node named {ref[6:]!r} in fragment")
        return name
    if ref == "@bound":
        if binding is None:
            raise BindingError(f"unbound modifier {cdef.id}")
        return binding
    if ref.startswith("@req:"):
        tag = ref[5:]
        found = _most_recent(graph, frozenset({tag}), skip=own)
        if found is None:
            raise BindingError(f"unsatisfied requirement: {cdef.id} requires {tag}")
        return found
    if ref not in graph.nodes:
        raise CompositionError(f"{cdef.id}: unknown node reference {ref!r}")
    return ref


def apply_concept(graph: SceneGraph, cdef: ConceptDef, binding: str | None = None) -> SceneGraph:
    """Return a new graph with ``cdef``'s fragment applied."""
    if cdef.is_modifier:
        if binding is None:
            raise BindingError(f"unbound modifier {cdef.id}")
        if binding not in graph.nodes:
            raise BindingError(f"{cdef.id}: binding target {binding!r} not in graph")
    else:
        if binding is not None:
            raise CompositionError(f"{cdef.id}: entity concepts take no binding")
        for tag in sorted(cdef.requires):
            if _most_recent(graph, frozenset({tag})) is None:
                raise BindingError(f"unsatisfied requirement: {cdef.id} requires {tag}")

    out = graph.copy()
    own = _node_ids_for(cdef)
    written: dict[tuple[str, str], Any] = {}
    adds = iter(own)
    for op in cdef.fragment:
        if isinstance(op, AddNode):
            nid = next(adds)
            if nid in out.nodes:
                raise CompositionError(f"{cdef.id}: node {nid!r} already present")
            attrs = {k: _resolve_param(cdef, v) for k, v in op.attrs.items()}
            out.nodes[nid] = Node(op.cls, frozenset(op.tags) | {op.cls}, attrs)
            out.provenance[nid] = cdef.id
        elif isinstance(op, AddEdge):
            src = _resolve_ref(out, op.src, own, binding, cdef)
            dst = _resolve_ref(out, op.dst, own, binding, cdef)
            out.provenance[f"edge:{len(out.edges)}"] = cdef.id
            out.edges.append(Edge(src, dst, op.relation, dict(op.attrs)))
        elif isinstance(op, SetAttr):
            value = _resolve_param(cdef, op.value)
            if op.target == "@bound_edge":
                target = _resolve_ref(out, "@bound", own, binding, cdef)
                idx = next((i for i, e in enumerate(out.edges) if e.dst == target), None)
                if idx is None:
                    raise BindingError(f"{cdef.id}: bound node {target!r} has no incoming edge")
                slot = (f"edge:{idx}", op.key)
                if slot in written and written[slot] != value:
                    raise CompositionError(f"{cdef.id}: attribute conflict on {slot}")
                written[slot] = value
                out.edges[idx].attrs[op.key] = value
                out.provenance[f"edge:{idx}.{op.key}"] = cdef.id
            else:
                target = _resolve_ref(out, op.target, own, binding, cdef)
                slot = (target, op.key)
                if slot in written and written[slot] != value:
                    raise CompositionError(f"{cdef.id}: attribute conflict on {target}.{op.key}")
                written[slot] = value
                out.nodes[target].attrs[op.key] = value
                out.provenance[f"{target}.{op.key}"] = cdef.id
    return out


def bind_modifier(graph: SceneGraph, cdef: ConceptDef, steps: Composition | None = None) -> str:
    """Most recently added node (by a composition step) carrying all ``requires`` tags."""
    allowed = None if steps is None else set(steps.concept_ids)
    for nid in reversed(graph.nodes):
        origin = graph.provenance.get(nid)
        if origin == ANCHOR or (allowed is not None and origin not in allowed):
            continue
        node = graph.nodes[nid]
        if cdef.requires <= (node.tags | {node.cls}):
            return nid
    raise BindingError(f"unbound modifier {cdef.id}: no compatible node for {sorted(cdef.requires)}")


def canonical_order(catalog: Catalog, concepts: Iterable[str]) -> list[str]:
    """Entities in id order (deferring any whose prerequisites come later), then modifiers in id order."""
    ids = sorted(set(concepts))
    for cid in ids:
        if cid not in catalog.concepts:
            raise UnknownConceptError(cid)
    pending = [c for c in ids if not catalog.concepts[c].is_modifier]
    modifiers = [c for c in ids if catalog.concepts[c].is_modifier]
    ordered: list[str] = []
    produced: set[str] = set()
    while pending:
        for cid in pending:
            if catalog.concepts[cid].requires <= produced:
                break
        else:
            cid = pending[0]
            missing = sorted(catalog.concepts[cid].requires - produced)
            raise BindingError(f"unsatisfied requirement: {cid} requires {', '.join(missing)}")
        pending.remove(cid)
        ordered.append(cid)
        produced |= catalog.concepts[cid].produced_tags()
    return ordered + modifiers


def plan_composition(catalog: Catalog, concepts: Iterable[str]) -> tuple[Composition, SceneGraph]:
    """Canonical replay; raises :class:`CompositionError` when the set cannot be built."""
    graph = anchor_graph(catalog)
    steps: list[tuple[str, str | None]] = []
    for cid in canonical_order(catalog, concepts):
        cdef = catalog.concepts[cid]
        binding = bind_modifier(graph, cdef) if cdef.is_modifier else None
        graph = apply_concept(graph, cdef, binding)
        steps.append((cid, binding))
    return Composition(tuple(steps)), graph


def build_anchor(catalog: Catalog, concepts: Iterable[str]) -> tuple[Composition, SceneGraph]:
    """Anchor scene graph of a valid concept set; deterministic for any input ordering."""
    from .catalog import check_validity

    ids = frozenset(concepts)
    verdict = check_validity(catalog, ids, max(len(ids), catalog.max_depth_default))
    if not verdict.valid:
        raise CompositionError("invalid composition: " + "; ".join(verdict.violations))
    return plan_composition(catalog, ids)


def describe(catalog: Catalog, comp: Composition) -> str:
    """Plain-text scene description assembled from concept descriptions, in replay order."""
    return " ".join(catalog.concepts[cid].description for cid in comp.concept_ids)
