"""Ground-truth answers computed from anchor scene graphs, with no rendering.

Three oracle kinds are supported, selected by the ``kind`` key of a rule file:

``priority``
    Driving-style table: the highest-priority rule whose predicate holds
    fixes the expected action.
``best_fit``
    Indoor-style library: among rules whose required visual elements are all
    present, the one covering the most elements picks the question.
``fixed``
    One question with one expected option (synthetic domains).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol

import yaml

from .catalog import Catalog
from .scene import ANCHOR, SceneGraph, build_anchor


class OracleError(ValueError):
    """Malformed rule data or a graph the oracle cannot label."""


class UnmatchableComposition(OracleError):
    """No indoor rule covers the scene's elements."""


class Action(str, enum.Enum):
    EMERGENCY_STOP = "emergency_stop"
    SLOW_DOWN = "slow_down"
    CONTINUE = "continue"


class Pattern(str, enum.Enum):
    MODUS_PONENS = "modus_ponens"
    MODUS_TOLLENS = "modus_tollens"
    DISJUNCTIVE_SYLLOGISM = "disjunctive_syllogism"


@dataclass(frozen=True)
class ExpectedAnswer:
    """The question to pose and the option label that counts as correct."""

    domain: str
    choice: str
    question_text: str
    options: tuple[tuple[str, str], ...]
    rule_id: str | None = None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)

    def option_text(self, label: str) -> str:
        return dict(self.options)[label]

    def prompt(self) -> str:
        """Question followed by one ``(X) text`` line per option."""
        lines = [self.question_text]
        lines += [f"({label}) {text}" for label, text in self.options]
        return "\n".join(lines)


class Oracle(Protocol):
    domain: str

    def answer(self, concepts: frozenset[str], graph: SceneGraph) -> ExpectedAnswer: ...


def _options(raw: Any, where: str) -> tuple[tuple[str, str], ...]:
    if not isinstance(raw, Mapping) or len(raw) < 2:
        raise OracleError(f"{where}: options must map at least two labels to text")
    return tuple((str(k), str(v)) for k, v in raw.items())


# -- driving -------------------------------------------------------------------


def distance_bucket(value: Any, near: tuple[float, float], far: tuple[float, float]) -> str:
    """``near`` / ``far`` when the range lies inside that bucket, else ``mid``."""
    if isinstance(value, (tuple, list)):
        low, high = float(value[0]), float(value[1])
    else:
        low = high = float(value)
    if near[0] <= low and high <= near[1]:
        return "near"
    if far[0] <= low and high <= far[1]:
        return "far"
    return "mid"


@dataclass(frozen=True)
class Predicate:
    """Some node carries ``tag`` and every filtered attribute takes an allowed value."""

    tag: str
    filters: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def matching_nodes(self, graph: SceneGraph, near: tuple[float, float], far: tuple[float, float]) -> list[str]:
        out = []
        for nid, node in graph.nodes.items():
            if self.tag not in node.tags and node.cls != self.tag:
                continue
            ok = True
            for key, allowed in self.filters.items():
                if key not in node.attrs:
                    ok = False
                    break
                value = node.attrs[key]
                if key == "distance":
                    value = distance_bucket(value, near, far)
                if str(value) not in allowed:
                    ok = False
                    break
            if ok:
                out.append(nid)
        return out


@dataclass(frozen=True)
class DrivingRule:
    name: str
    priority: int
    predicate: Predicate
    action: Action


@dataclass(frozen=True)
class DrivingOracle:
    prompt: str
    options: tuple[tuple[str, str], ...]
    action_labels: Mapping[Action, str]
    rules: tuple[DrivingRule, ...]
    default: Action = Action.CONTINUE
    near: tuple[float, float] = (2.0, 4.0)
    far: tuple[float, float] = (15.0, 25.0)
    domain: str = "driving"

    def fired_rule(self, graph: SceneGraph) -> DrivingRule | None:
        if not any(n.cls == "ego" for n in graph.nodes.values()):
            raise OracleError("missing ego node")
        for rule in self.rules:  # sorted by descending priority at load time
            if rule.predicate.matching_nodes(graph, self.near, self.far):
                return rule
        return None

    def label_driving(self, graph: SceneGraph) -> ExpectedAnswer:
        rule = self.fired_rule(graph)
        action = self.default if rule is None else rule.action
        return ExpectedAnswer(
            domain=self.domain,
            choice=self.action_labels[action],
            question_text=self.prompt,
            options=self.options,
            rule_id=None if rule is None else rule.name,
        )

    def answer(self, concepts: frozenset[str], graph: SceneGraph) -> ExpectedAnswer:
        return self.label_driving(graph)

    def action_of(self, label: str) -> Action:
        for action, lab in self.action_labels.items():
            if lab == label:
                return action
        raise OracleError(f"no action for option {label!r}")


def _load_priority(doc: Mapping[str, Any]) -> DrivingOracle:
    options = _options(doc.get("options"), "priority rules")
    labels = {lab for lab, _ in options}
    try:
        action_labels = {Action(k): str(v) for k, v in (doc.get("actions") or {}).items()}
    except ValueError as exc:
        raise OracleError(f"unknown action: {exc}") from None
    if set(action_labels) != set(Action) or not set(action_labels.values()) <= labels:
        raise OracleError("actions must map every action to an offered option")
    rules = []
    for raw in doc.get("rules") or ():
        match = dict(raw.get("match") or {})
        if "tag" not in match:
            raise OracleError(f"rule {raw.get('name')!r}: match needs a tag")
        tag = str(match.pop("tag"))
        filters = {str(k): frozenset(str(v) for v in (vs if isinstance(vs, list) else [vs])) for k, vs in match.items()}
        rules.append(
            DrivingRule(
                name=str(raw.get("name", f"rule{len(rules)}")),
                priority=int(raw["priority"]),
                predicate=Predicate(tag, filters),
                action=Action(raw["action"]),
            )
        )
    priorities = [r.priority for r in rules]
    if len(set(priorities)) != len(priorities):
        raise OracleError("rule priorities must be unique")
    buckets = doc.get("distance_buckets") or {}
    near = tuple(float(v) for v in buckets.get("near", (2, 4)))
    far = tuple(float(v) for v in buckets.get("far", (15, 25)))
    return DrivingOracle(
        prompt=str(doc.get("prompt", "")),
        options=options,
        action_labels=action_labels,
        rules=tuple(sorted(rules, key=lambda r: -r.priority)),
        default=Action(doc.get("default", "continue")),
        near=near,  # type: ignore[arg-type]
        far=far,  # type: ignore[arg-type]
        domain=str(doc.get("domain", "driving")),
    )


# -- indoor --------------------------------------------------------------------

HAZARD_TAG = "hazard"
HAZARD_FREE = "hazard_free"


def scene_elements(graph: SceneGraph) -> frozenset[str]:
    """Visual elements of a scene: tags, classes and attribute-derived markers.

    A true boolean attribute contributes its key, a string attribute
    ``key:value``.  ``hazard_free`` is added when no node is tagged hazardous.
    """
    elems: set[str] = set()
    for node in graph.nodes.values():
        elems.add(node.cls)
        elems.update(node.tags)
        for key, value in node.attrs.items():
            if value is True:
                elems.add(key)
            elif isinstance(value, str):
                elems.add(f"{key}:{value}")
    if HAZARD_TAG not in elems:
        elems.add(HAZARD_FREE)
    return frozenset(elems)


@dataclass(frozen=True)
class IndoorRule:
    id: str
    pattern: Pattern
    required_elements: frozenset[str]
    question: str
    options: tuple[tuple[str, str], ...]
    expected: str
    chain: str = ""

    def fit(self, elements: frozenset[str]) -> int:
        return len(self.required_elements & elements)

    def matches(self, elements: frozenset[str]) -> bool:
        return self.required_elements <= elements


@dataclass(frozen=True)
class IndoorOracle:
    rules: tuple[IndoorRule, ...]
    domain: str = "indoor"

    def matching_rules(self, graph: SceneGraph) -> list[IndoorRule]:
        elems = scene_elements(graph)
        return [r for r in self.rules if r.matches(elems)]

    def match_indoor_rule(self, concepts: Iterable[str], graph: SceneGraph) -> IndoorRule:
        matches = self.matching_rules(graph)
        if not matches:
            raise UnmatchableComposition(f"unmatchable composition: {sorted(set(concepts))}")
        elems = scene_elements(graph)
        return min(matches, key=lambda r: (-r.fit(elems), r.id))

    def answer(self, concepts: frozenset[str], graph: SceneGraph) -> ExpectedAnswer:
        rule = self.match_indoor_rule(concepts, graph)
        return ExpectedAnswer(self.domain, rule.expected, rule.question, rule.options, rule.id)


def _load_best_fit(doc: Mapping[str, Any]) -> IndoorOracle:
    rules = []
    seen = set()
    for raw in doc.get("rules") or ():
        rid = str(raw["id"])
        if rid in seen:
            raise OracleError(f"duplicate rule id {rid!r}")
        seen.add(rid)
        required = frozenset(str(e) for e in raw.get("required") or ())
        if not required:
            raise OracleError(f"rule {rid}: required elements must be nonempty")
        options = _options(raw.get("options"), f"rule {rid}")
        if len(options) != 2:
            raise OracleError(f"rule {rid}: indoor questions offer exactly two options")
        expected = str(raw.get("expected"))
        if expected not in dict(options):
            raise OracleError(f"rule {rid}: expected {expected!r} is not an option")
        rules.append(
            IndoorRule(
                id=rid,
                pattern=Pattern(raw.get("pattern", "modus_ponens")),
                required_elements=required,
                question=str(raw["question"]),
                options=options,
                expected=expected,
                chain=str(raw.get("chain", "")),
            )
        )
    if not rules:
        raise OracleError("empty rule library")
    return IndoorOracle(tuple(rules), domain=str(doc.get("domain", "indoor")))


# -- fixed ---------------------------------------------------------------------


@dataclass(frozen=True)
class FixedOracle:
    question: str
    options: tuple[tuple[str, str], ...]
    expected: str
    domain: str = "synthetic"

    def answer(self, concepts: frozenset[str], graph: SceneGraph) -> ExpectedAnswer:
        return ExpectedAnswer(self.domain, self.expected, self.question, self.options, "fixed")


def _load_fixed(doc: Mapping[str, Any]) -> FixedOracle:
    options = _options(doc.get("options"), "fixed oracle")
    expected = str(doc.get("expected"))
    if expected not in dict(options):
        raise OracleError(f"expected {expected!r} is not an option")
    return FixedOracle(str(doc.get("question", "")), options, expected, str(doc.get("domain", "synthetic")))


# -- loading and dispatch ------------------------------------------------------

_LOADERS = {"priority": _load_priority, "best_fit": _load_best_fit, "fixed": _load_fixed}


def load_oracle(source: str | Mapping[str, Any]) -> Oracle:
    doc = source if isinstance(source, Mapping) else yaml.safe_load(source)
    if not isinstance(doc, Mapping):
        raise OracleError("rule document must be a mapping")
    kind = doc.get("kind")
    if kind not in _LOADERS:
        raise OracleError(f"unknown oracle kind {kind!r}")
    return _LOADERS[kind](doc)


def load_oracle_file(path: str | Path) -> Oracle:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"rules not found: {path}")
    return load_oracle(path.read_text(encoding="utf-8"))


def bundled_oracle(domain: str) -> Oracle:
    from importlib import resources

    return load_oracle(resources.files("failmode.data").joinpath(f"{domain}_rules.yaml").read_text("utf-8"))


def label_driving(oracle: DrivingOracle, graph: SceneGraph) -> ExpectedAnswer:
    return oracle.label_driving(graph)


def match_indoor_rule(oracle: IndoorOracle, concepts: Iterable[str], graph: SceneGraph) -> IndoorRule:
    return oracle.match_indoor_rule(concepts, graph)


def ground_truth(catalog: Catalog, oracle: Oracle, concepts: Iterable[str]) -> ExpectedAnswer:
    """Expected answer for a valid set: build its anchor graph, then ask the oracle."""
    ids = frozenset(concepts)
    _, graph = build_anchor(catalog, ids)
    return oracle.answer(ids, graph)


def step_nodes(graph: SceneGraph) -> list[str]:
    """Node ids added by composition steps (anchor nodes excluded)."""
    return [nid for nid in graph.nodes if graph.provenance.get(nid) != ANCHOR]
