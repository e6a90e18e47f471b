"""Budgeted search for failure modes: Random, Beam Search with MMR, and GPTS."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Iterable, Sequence

import numpy as np

from .catalog import Catalog, canonical_key, enumerate_expansions, enumerate_valid_sets
from .evaluator import BudgetLedger, EvalRecord, Evaluator
from .gp import KernelSpec, encode_many, fit, sample_posterior
from .metrics import as_fraction, jaccard
from .oracle import UnmatchableComposition
from .seeding import stream


class SearchSpaceExhausted(RuntimeError):
    """No valid, unexplored concept set is left to propose."""


class Algo(str, enum.Enum):
    RANDOM = "random"
    BEAM = "beam"
    GPTS = "gpts"


@dataclass(frozen=True)
class SearchConfig:
    algo: Algo = Algo.GPTS
    B: int = 1000
    m: int = 5
    k: int = 5
    D: int = 5
    lam: float = 0.25
    tau: float = 0.6
    B_BS: int = 500
    pool_size: int = 256
    seed: int = 0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    noise_refit: bool = False
    max_attempts: int = 2000

    def __post_init__(self) -> None:
        object.__setattr__(self, "algo", Algo(self.algo))
        problems = []
        if self.B < 0:
            problems.append("B must be non-negative")
        if self.m < 1:
            problems.append("m must be at least 1")
        if self.k < 1:
            problems.append("k must be at least 1")
        if self.D < 1:
            problems.append("D must be at least 1")
        if self.lam < 0:
            problems.append("lambda must be non-negative")
        if not 0 < self.tau <= 1:
            problems.append("tau must lie in (0, 1]")
        if not 0 <= self.B_BS <= self.B:
            problems.append("B_BS must lie in [0, B]")
        if self.pool_size < 1:
            problems.append("pool_size must be at least 1")
        if problems:
            raise ValueError("invalid search config: " + "; ".join(problems))

    @property
    def max_sets(self) -> int:
        return self.B // self.m

    def to_dict(self) -> dict[str, Any]:
        return {
            "algo": self.algo.value,
            "B": self.B,
            "m": self.m,
            "k": self.k,
            "D": self.D,
            "lambda": self.lam,
            "tau": self.tau,
            "B_BS": self.B_BS,
            "pool_size": self.pool_size,
            "seed": self.seed,
            "kernel": self.kernel.family.value,
            "noise": self.kernel.noise_variance,
            "lengthscale": self.kernel.lengthscale,
            "noise_refit": self.noise_refit,
        }


@dataclass
class SearchResult:
    all_candidates: list[EvalRecord] = field(default_factory=list)
    failure_modes: list[frozenset[str]] = field(default_factory=list)
    spent: int = 0
    trace: list[dict[str, Any]] = field(default_factory=list)
    unspent: int = 0
    warnings: list[str] = field(default_factory=list)
    skipped: list[frozenset[str]] = field(default_factory=list)


class _Run:
    """Shared bookkeeping: dedup, budget, trace and failure-mode classification."""

    def __init__(self, cfg: SearchConfig, evaluator: Evaluator, label: str):
        self.cfg = cfg
        self.evaluator = evaluator
        self.label = label
        self.ledger = BudgetLedger(cfg.max_sets * cfg.m)
        self.tau = as_fraction(cfg.tau)
        self.result = SearchResult()
        self.seen: set[frozenset[str]] = set()

    @property
    def full(self) -> bool:
        return len(self.result.all_candidates) >= self.cfg.max_sets

    def evaluate(self, s: frozenset[str], phase: str, step: int) -> EvalRecord | None:
        self.seen.add(s)
        try:
            rec = self.evaluator.evaluate(s, self.cfg.m, self.ledger, phase=phase)
        except UnmatchableComposition:
            self.result.skipped.append(s)  # no rule applies: invalid, not charged
            return None
        res = self.result
        res.all_candidates.append(rec)
        res.spent += rec.budget_cost
        if rec.fr >= self.tau and s not in res.failure_modes:
            res.failure_modes.append(s)
        res.trace.append(
            {"phase": phase, "step": step, "set": list(canonical_key(s)),
             "fr": float(rec.fr), "failures": rec.failures, "spent": res.spent}
        )
        return rec

    def warn(self, msg: str) -> None:
        self.result.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)

    def finish(self) -> SearchResult:
        self.result.unspent = self.cfg.B - self.result.spent
        return self.result


# -- random --------------------------------------------------------------------


def _grow(catalog: Catalog, size: int, D: int, rng: np.random.Generator) -> frozenset[str] | None:
    s: frozenset[str] = frozenset()
    while len(s) < size:
        options = enumerate_expansions(catalog, s, D)
        if not options:
            return None
        s = options[int(rng.integers(len(options)))]
    return s


def random_valid_set(catalog: Catalog, D: int, rng: np.random.Generator, restarts: int = 20) -> frozenset[str] | None:
    """Uniform size in 1..D, grown by uniform valid expansions; restart on dead ends."""
    size = int(rng.integers(1, D + 1))
    for _ in range(restarts):
        s = _grow(catalog, size, D, rng)
        if s is not None:
            return s
    return None


def run_random(cfg: SearchConfig, catalog: Catalog, evaluator: Evaluator) -> SearchResult:
    run = _Run(cfg, evaluator, "random")
    rng = stream(cfg.seed, "random")
    attempts = 0
    while not run.full:
        s = random_valid_set(catalog, cfg.D, rng)
        if s is None or s in run.seen:
            attempts += 1
            if attempts >= cfg.max_attempts:
                run.warn(f"search space exhausted after {len(run.seen)} sets; budget left unspent")
                break
            continue
        attempts = 0
        run.evaluate(s, "random", len(run.result.all_candidates))
    return run.finish()


# -- beam search with MMR -----------------------------------------------------


def mmr_value(fr: Fraction | float, frontier: Sequence[Iterable[str]], candidate: Iterable[str], lam: float | Fraction) -> Fraction:
    """fr minus lam times the largest Jaccard similarity to the frontier."""
    fr = as_fraction(fr)
    if not frontier:
        return fr
    return fr - as_fraction(lam) * max(jaccard(candidate, f) for f in frontier)


def select_frontier(candidates: Sequence[EvalRecord], k: int, lam: float | Fraction) -> list[frozenset[str]]:
    """k greedy argmax steps of the MMR value against the partially built frontier.

    Ties go to the higher failure rate, then to the lexicographically smaller set.
    """
    lam = as_fraction(lam)
    remaining = list(candidates)
    frontier: list[frozenset[str]] = []
    while remaining and len(frontier) < k:
        best = min(
            remaining,
            key=lambda r: (-mmr_value(r.fr, frontier, r.concepts, lam), -r.fr, r.key),
        )
        frontier.append(best.concepts)
        remaining.remove(best)
    return frontier


def _beam(run: _Run, catalog: Catalog, max_sets: int, phase: str) -> None:
    cfg = run.cfg
    order_rng = stream(cfg.seed, "beam-order")
    frontier: list[frozenset[str]] = [frozenset()]
    for level in range(1, cfg.D + 1):
        pending: list[frozenset[str]] = []
        queued: set[frozenset[str]] = set()
        for parent in frontier:
            for s in enumerate_expansions(catalog, parent, cfg.D):
                if s not in run.seen and s not in queued:
                    queued.add(s)
                    pending.append(s)
        if not pending:
            return
        # visit order matters only when the budget runs out mid-level
        order = order_rng.permutation(len(pending))
        candidates = []
        for i in order:
            if len(run.result.all_candidates) >= max_sets:
                return
            rec = run.evaluate(pending[i], phase, level)
            if rec is not None:
                candidates.append(rec)
        frontier = select_frontier(candidates, cfg.k, cfg.lam)


def run_beam(cfg: SearchConfig, catalog: Catalog, evaluator: Evaluator) -> SearchResult:
    run = _Run(cfg, evaluator, "beam")
    _beam(run, catalog, cfg.max_sets, "beam")
    return run.finish()


# -- GP + Thompson sampling ---------------------------------------------------


def proposal_pool(
    catalog: Catalog, evaluated: set[frozenset[str]], pool_size: int, D: int, rng: np.random.Generator, max_attempts: int | None = None
) -> list[frozenset[str]]:
    """Distinct valid unexplored sets by rejection sampling, exhaustive on failure."""
    attempts = max_attempts if max_attempts is not None else 20 * pool_size
    pool: list[frozenset[str]] = []
    members: set[frozenset[str]] = set()
    for _ in range(attempts):
        if len(pool) >= pool_size:
            break
        s = random_valid_set(catalog, D, rng)
        if s is None or s in evaluated or s in members:
            continue
        members.add(s)
        pool.append(s)
    if not pool:
        rest = [s for s in enumerate_valid_sets(catalog, D) if s not in evaluated]
        if not rest:
            raise SearchSpaceExhausted("every valid set has been evaluated")
        idx = rng.permutation(len(rest))[:pool_size]
        pool = [rest[i] for i in sorted(idx)]
    return pool


def propose_thompson(
    model: Any, catalog: Catalog, evaluated: set[frozenset[str]], pool_size: int, D: int,
    pool_rng: np.random.Generator, draw_rng: np.random.Generator,
) -> frozenset[str]:
    """Argmax of one joint posterior draw over a pool of unexplored sets."""
    pool = proposal_pool(catalog, evaluated, pool_size, D, pool_rng)
    draw = sample_posterior(model, encode_many(pool, catalog), draw_rng)
    best = max(draw)
    return min((s for s, v in zip(pool, draw) if v == best), key=canonical_key)


def run_gpts(cfg: SearchConfig, catalog: Catalog, evaluator: Evaluator) -> SearchResult:
    run = _Run(cfg, evaluator, "gpts")
    _beam(run, catalog, min(cfg.B_BS // cfg.m, cfg.max_sets), "beam")
    pool_rng = stream(cfg.seed, "ts-pool")
    draw_rng = stream(cfg.seed, "ts-draw")
    grid = (0.01, 0.05, 0.1) if cfg.noise_refit else None
    for it in range((cfg.B - cfg.B_BS) // cfg.m):
        if run.full:
            break
        recs = run.result.all_candidates
        X = encode_many([r.concepts for r in recs], catalog)
        y = np.array([float(r.fr) for r in recs])
        model = fit(X, y, cfg.kernel, noise_grid=grid)
        try:
            s = propose_thompson(model, catalog, run.seen, cfg.pool_size, cfg.D, pool_rng, draw_rng)
        except SearchSpaceExhausted as exc:
            run.warn(f"search space exhausted during Thompson phase: {exc}")
            break
        run.evaluate(s, "ts", it)
    return run.finish()


def run_search(cfg: SearchConfig, catalog: Catalog, evaluator: Evaluator) -> SearchResult:
    runner = {Algo.RANDOM: run_random, Algo.BEAM: run_beam, Algo.GPTS: run_gpts}[cfg.algo]
    return runner(cfg, catalog, evaluator)


def with_overrides(cfg: SearchConfig, **changes: Any) -> SearchConfig:
    return replace(cfg, **changes)
