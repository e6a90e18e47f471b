"""Target-model abstraction, the m-sample failure-rate estimator and budget accounting."""

from __future__ import annotations

import json
import re
import select
import shlex
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np
import yaml

from .catalog import Catalog, canonical_key
from .oracle import ExpectedAnswer, Oracle
from .scene import build_anchor, describe
from .seeding import derive_int

REFUSAL = "<refusal>"


class BudgetExhausted(RuntimeError):
    """The ledger cannot cover another m-sample evaluation."""


class TargetTransportError(RuntimeError):
    """The target failed to deliver an answer (crash, timeout, malformed reply)."""


# -- planted scenarios -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticScenario:
    base: float
    atom_weights: Mapping[str, float] = field(default_factory=dict)
    pair_weights: Mapping[frozenset[str], float] = field(default_factory=dict)
    visibility: Mapping[str, float] = field(default_factory=dict)
    name: str = "scenario"


def planted_probability(scenario: SyntheticScenario, concepts: Iterable[str]) -> float:
    """Clamped additive failure probability of a set under a planted scenario."""
    ids = sorted(set(concepts))
    p = scenario.base + sum(scenario.atom_weights.get(c, 0.0) for c in ids)
    p += sum(scenario.pair_weights.get(frozenset(pair), 0.0) for pair in combinations(ids, 2))
    return min(1.0, max(0.0, p))


def load_scenario(source: str | Mapping[str, Any]) -> SyntheticScenario:
    doc = source if isinstance(source, Mapping) else yaml.safe_load(source)
    if not isinstance(doc, Mapping) or "base" not in doc:
        raise ValueError("scenario document needs a base probability")
    pairs: dict[frozenset[str], float] = {}
    for entry in doc.get("pair_weights") or ():
        pair = frozenset(entry["pair"])
        if len(pair) != 2:
            raise ValueError(f"pair weight needs two distinct concepts: {entry['pair']}")
        pairs[pair] = pairs.get(pair, 0.0) + float(entry["weight"])
    return SyntheticScenario(
        base=float(doc["base"]),
        atom_weights={str(k): float(v) for k, v in (doc.get("atom_weights") or {}).items()},
        pair_weights=pairs,
        visibility={str(k): float(v) for k, v in (doc.get("visibility") or {}).items()},
        name=str(doc.get("name", "scenario")),
    )


def load_scenario_file(path: str | Path) -> SyntheticScenario:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scenario not found: {path}")
    return load_scenario(path.read_text(encoding="utf-8"))


def bundled_scenario(domain: str) -> SyntheticScenario:
    from importlib import resources

    return load_scenario(resources.files("failmode.data").joinpath(f"{domain}_scenario.yaml").read_text("utf-8"))


# -- requests and targets --------------------------------------------------------


@dataclass(frozen=True)
class QueryRequest:
    question: str
    options: tuple[tuple[str, str], ...]
    scene_description: str
    scene_graph: Mapping[str, Any]
    seed: int
    sample_index: int = 0
    concepts: tuple[str, ...] = ()

    def to_wire(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "options": dict(self.options),
            "scene_description": self.scene_description,
            "scene_graph": self.scene_graph,
            "seed": self.seed,
            "sample_index": self.sample_index,
            "concepts": list(self.concepts),
        }


class TargetModel(Protocol):
    def answer(self, request: QueryRequest) -> str: ...


class SyntheticTarget:
    """Answers correctly with probability 1 - p(S), otherwise picks a wrong option.

    ``p(S)`` is the scenario's planted probability.  The expected option is
    recomputed from the oracle so the target needs nothing beyond the request.
    """

    def __init__(self, scenario: SyntheticScenario, catalog: Catalog, oracle: Oracle, seed: int = 0):
        self.scenario = scenario
        self.catalog = catalog
        self.oracle = oracle
        self.seed = int(seed)
        self._expected: dict[tuple[str, ...], ExpectedAnswer] = {}

    def _truth(self, key: tuple[str, ...]) -> ExpectedAnswer:
        if key not in self._expected:
            _, graph = build_anchor(self.catalog, key)
            self._expected[key] = self.oracle.answer(frozenset(key), graph)
        return self._expected[key]

    def answer(self, request: QueryRequest) -> str:
        key = canonical_key(request.concepts)
        truth = self._truth(key)
        rng = np.random.default_rng([self.seed, request.seed])
        p = planted_probability(self.scenario, key)
        label = truth.choice
        if rng.random() < p:
            wrong = [lab for lab, _ in request.options if lab != truth.choice]
            label = wrong[int(rng.integers(len(wrong)))]
        return f"({label}) {dict(request.options)[label]}"

    def recognize(self, concept: str, statement_true: bool, seed: int) -> bool:
        """Judge a perception statement about ``concept``; returns the verdict."""
        rng = np.random.default_rng([self.seed, seed])
        correct = rng.random() < self.scenario.visibility.get(concept, 1.0)
        return statement_true if correct else not statement_true


class ReplayTarget:
    """Answers looked up by (canonical set, sample index) from a records log."""

    def __init__(self, answers: Mapping[tuple[tuple[str, ...], int], str]):
        self.answers = dict(answers)

    @classmethod
    def from_log(cls, path: str | Path) -> "ReplayTarget":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"replay log not found: {path}")
        table: dict[tuple[tuple[str, ...], int], str] = {}
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            key = canonical_key(rec["set"])
            for i, ans in enumerate(rec["answers"]):
                table.setdefault((key, i), ans)
        return cls(table)

    def answer(self, request: QueryRequest) -> str:
        key = (canonical_key(request.concepts), request.sample_index)
        if key not in self.answers:
            raise TargetTransportError(f"no recorded answer for {key}")
        return self.answers[key]


class SubprocessTarget:
    """A persistent external process speaking one JSON object per line each way."""

    def __init__(self, command: str | Sequence[str], timeout: float = 60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
                )
            except OSError as exc:
                raise TargetTransportError(f"cannot start target: {exc}") from exc
        return self._proc

    def answer(self, request: QueryRequest) -> str:
        with self._lock:
            proc = self._ensure()
            try:
                proc.stdin.write(json.dumps(request.to_wire()) + "\n")
                proc.stdin.flush()
                ready, _, _ = select.select([proc.stdout], [], [], self.timeout)
                if not ready:
                    self.close()
                    raise TargetTransportError("target timed out")
                line = proc.stdout.readline()
            except (BrokenPipeError, OSError, ValueError) as exc:
                self.close()
                raise TargetTransportError(f"target pipe failed: {exc}") from exc
            if not line:
                self.close()
                raise TargetTransportError("target closed its output")
        try:
            return str(json.loads(line)["answer"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise TargetTransportError(f"malformed target reply: {line.strip()[:80]!r}") from exc

    def close(self) -> None:
        if self._proc is not None:
            for stream in (self._proc.stdin, self._proc.stdout):
                try:
                    stream.close()
                except OSError:
                    pass
            if self._proc.poll() is None:
                self._proc.kill()
            self._proc.wait()
            self._proc = None


# -- parsing -----------------------------------------------------------------------

_LEAD = re.compile(r"^[\s\W]*\(?([a-z])\)?(?=$|[\s.:,)\]-])")


def _norm(text: str) -> str:
    return " ".join(re.sub(r"[^\w\s]", " ", text.lower()).split())


def parse_choice(raw: str, options: Sequence[str] | Sequence[tuple[str, str]]) -> str:
    """Map a free-form answer to an option label, or :data:`REFUSAL`.

    Full option text wins over a leading letter, so an answer beginning with
    the article "A" still resolves to the option it spells out.
    """
    if not options:
        raise ValueError("options must be nonempty")
    pairs = [(o, "") if isinstance(o, str) else (str(o[0]), str(o[1])) for o in options]
    text = _norm(raw)
    hits = {lab for lab, body in pairs if body and _norm(body) and _norm(body) in text}
    if len(hits) == 1:
        return hits.pop()
    m = _LEAD.match(raw.strip().lower())
    if m:
        by_letter = {lab.lower(): lab for lab, _ in pairs}
        if m.group(1) in by_letter:
            return by_letter[m.group(1)]
    return REFUSAL


# -- records and budget ----------------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    """One evaluated concept set: m answers and the exact failure count."""

    concepts: frozenset[str]
    m: int
    failures: int
    answers: tuple[str, ...]
    seed: int
    expected: str = ""
    parsed: tuple[str, ...] = ()
    errors: tuple[bool, ...] = ()
    phase: str = "search"
    rule_id: str | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.failures <= self.m:
            raise ValueError("failures must lie in 0..m")

    @property
    def fr(self) -> Fraction:
        return Fraction(self.failures, self.m)

    @property
    def budget_cost(self) -> int:
        return self.m

    @property
    def key(self) -> tuple[str, ...]:
        return canonical_key(self.concepts)

    @property
    def refusals(self) -> int:
        return sum(p == REFUSAL for p in self.parsed)

    def to_json(self) -> dict[str, Any]:
        return {
            "set": list(self.key),
            "m": self.m,
            "failures": self.failures,
            "fr": float(self.fr),
            "answers": list(self.answers),
            "parsed": list(self.parsed),
            "errors": list(self.errors),
            "expected": self.expected,
            "seed": self.seed,
            "phase": self.phase,
            "rule_id": self.rule_id,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "EvalRecord":
        # fr is re-derived from failures/m; the float in the log is informational
        return cls(
            concepts=frozenset(doc["set"]),
            m=int(doc["m"]),
            failures=int(doc["failures"]),
            answers=tuple(doc.get("answers", ())),
            seed=int(doc.get("seed", 0)),
            expected=str(doc.get("expected", "")),
            parsed=tuple(doc.get("parsed", ())),
            errors=tuple(bool(e) for e in doc.get("errors", ())),
            phase=str(doc.get("phase", "search")),
            rule_id=doc.get("rule_id"),
        )


def write_records(records: Iterable[EvalRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_records(path: str | Path) -> list[EvalRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"records not found: {path}")
    return [EvalRecord.from_json(json.loads(ln)) for ln in path.read_text("utf-8").splitlines() if ln.strip()]


class BudgetLedger:
    """Inference budget; ``reserve`` is atomic so concurrent callers never overdraw."""

    def __init__(self, total: int):
        if total < 0:
            raise ValueError("budget must be non-negative")
        self.total = int(total)
        self.spent = 0
        self.per_phase: dict[str, int] = {}
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return self.total - self.spent

    def reserve(self, m: int, phase: str = "search") -> None:
        with self._lock:
            if m > self.total - self.spent:
                raise BudgetExhausted(f"budget exhausted: {self.total - self.spent} remaining, {m} needed")
            self.spent += m
            self.per_phase[phase] = self.per_phase.get(phase, 0) + m


# -- the estimator -----------------------------------------------------------------


class Evaluator:
    """Ask the oracle's question m times and count disagreements.

    Each set's base seed is derived from ``(root_seed, stream, set)``, so the
    record for a set does not depend on when a search loop reaches it.
    """

    def __init__(
        self,
        catalog: Catalog,
        oracle: Oracle,
        target: TargetModel,
        root_seed: int = 0,
        retries: int = 2,
        workers: int = 1,
    ):
        self.catalog = catalog
        self.oracle = oracle
        self.target = target
        self.root_seed = int(root_seed)
        self.retries = int(retries)
        self.workers = max(1, int(workers))

    def set_seed(self, concepts: Iterable[str], stream: str = "search") -> int:
        return derive_int(self.root_seed, "target", stream, *canonical_key(concepts))

    def _ask(self, request: QueryRequest) -> tuple[str, bool]:
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                return self.target.answer(request), False
            except TargetTransportError as exc:
                last = exc
        return f"<error: {last}>", True

    def evaluate(
        self,
        concepts: Iterable[str],
        m: int,
        ledger: BudgetLedger,
        seed: int | None = None,
        phase: str = "search",
        stream: str = "search",
    ) -> EvalRecord:
        if m < 1:
            raise ValueError("m must be at least 1")
        ids = frozenset(concepts)
        # ground truth first: sets the oracle cannot label cost no budget
        comp, graph = build_anchor(self.catalog, ids)
        truth = self.oracle.answer(ids, graph)
        ledger.reserve(m, phase)
        base = self.set_seed(ids, stream) if seed is None else int(seed)
        scene = graph.to_dict()
        text = describe(self.catalog, comp)
        key = canonical_key(ids)
        requests = [
            QueryRequest(truth.prompt(), truth.options, text, scene, base + i, i, key) for i in range(m)
        ]
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(self._ask, requests))
        else:
            results = [self._ask(r) for r in requests]
        answers = tuple(a for a, _ in results)
        errors = tuple(e for _, e in results)
        parsed = tuple(REFUSAL if err else parse_choice(a, truth.options) for a, err in results)
        failures = sum(p != truth.choice for p in parsed)
        return EvalRecord(ids, m, failures, answers, base, truth.choice, parsed, errors, phase, truth.rule_id)


def evaluate(
    target: TargetModel,
    catalog: Catalog,
    oracle: Oracle,
    concepts: Iterable[str],
    m: int,
    ledger: BudgetLedger,
    seed: int,
) -> EvalRecord:
    """One-off evaluation with an explicit base seed (samples use seed+0..m-1)."""
    return Evaluator(catalog, oracle, target).evaluate(concepts, m, ledger, seed=seed)


# -- recognition probing -----------------------------------------------------------


@dataclass(frozen=True)
class RecognitionCounts:
    pos_correct: int
    pos_total: int
    neg_correct: int
    neg_total: int

    @property
    def rate(self) -> Fraction | None:
        total = self.pos_total + self.neg_total
        if total == 0:
            return None
        return Fraction(self.pos_correct + self.neg_correct, total)


def probe_recognition(target: Any, concepts: Iterable[str], n: int, root_seed: int = 0) -> dict[str, RecognitionCounts]:
    """Pose n true and n false perception statements per concept to a target
    exposing ``recognize(concept, statement_true, seed)``."""
    if not hasattr(target, "recognize"):
        raise TypeError("target does not support recognition probing")
    out = {}
    for cid in sorted(set(concepts)):
        base = derive_int(root_seed, "recognition", cid)
        pos = sum(target.recognize(cid, True, base + i) is True for i in range(n))
        neg = sum(target.recognize(cid, False, base + n + i) is False for i in range(n))
        out[cid] = RecognitionCounts(pos, n, neg, n)
    return out
