"""Run-level and concept-level statistics over evaluated records.

Rates are returned as :class:`fractions.Fraction` so that identities such as
``lift == observed - baseline`` hold exactly; convert with ``float`` for display.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from scipy.stats import spearmanr

from .catalog import canonical_key
from .evaluator import EvalRecord, RecognitionCounts

HIGH_RECOGNITION = Fraction(7, 10)
LOW_RECOGNITION = Fraction(3, 10)


def as_fraction(x: float | int | str | Fraction) -> Fraction:
    """Exact rational for a decimal as written (0.1 -> 1/10, not the binary float)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(repr(float(x)))


def jaccard(a: Iterable[str], b: Iterable[str]) -> Fraction:
    a, b = frozenset(a), frozenset(b)
    union = len(a | b)
    return Fraction(len(a & b), union) if union else Fraction(1)


def _mean(values: Sequence[Fraction]) -> Fraction:
    return sum(values, Fraction(0)) / len(values)


# -- failure modes and run summary ---------------------------------------------------


def classify_failure_modes(records: Iterable[EvalRecord], tau: float | Fraction) -> set[frozenset[str]]:
    """Sets whose failure rate reaches tau (the boundary is included)."""
    t = as_fraction(tau)
    return {r.concepts for r in records if r.fr >= t}


@dataclass(frozen=True)
class RunSummary:
    n_sets: int
    n_failure_modes: int
    pfm: Fraction
    mfr: Fraction
    div: Fraction | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_sets": self.n_sets,
            "n_failure_modes": self.n_failure_modes,
            "pfm": float(self.pfm),
            "mfr": float(self.mfr),
            "div": None if self.div is None else float(self.div),
        }


def diversity(modes: Iterable[Iterable[str]]) -> Fraction | None:
    """Mean pairwise Jaccard distance; undefined below two sets."""
    sets = sorted({frozenset(s) for s in modes}, key=canonical_key) if not isinstance(modes, list) else [frozenset(s) for s in modes]
    if len(sets) < 2:
        return None
    dists = [1 - jaccard(a, b) for a, b in combinations(sets, 2)]
    return _mean(dists)


def summarize(records: Sequence[EvalRecord], tau: float | Fraction) -> RunSummary:
    fms = classify_failure_modes(records, tau)
    n = len(records)
    inferences = sum(r.m for r in records)
    return RunSummary(
        n_sets=n,
        n_failure_modes=len(fms),
        pfm=Fraction(len(fms), n) if n else Fraction(0),
        mfr=Fraction(sum(r.failures for r in records), inferences) if inferences else Fraction(0),
        div=diversity(sorted(fms, key=canonical_key)),
    )


# -- concept profiles --------------------------------------------------------------


class Regime(str, enum.Enum):
    REASONING = "reasoning"
    RECOGNITION = "recognition"
    MIXED = "mixed"


def regime_for(R: Fraction | float) -> Regime:
    r = as_fraction(R)
    if r >= HIGH_RECOGNITION:
        return Regime.REASONING
    if r <= LOW_RECOGNITION:
        return Regime.RECOGNITION
    return Regime.MIXED


@dataclass(frozen=True)
class ConceptProfile:
    concept: str
    F: Fraction
    n: int
    R: Fraction | None = None
    regime: Regime | None = None

    def to_row(self) -> dict[str, Any]:
        return {
            "concept": self.concept,
            "F": float(self.F),
            "R": None if self.R is None else float(self.R),
            "n": self.n,
            "regime": None if self.regime is None else self.regime.value,
        }


def conditional_failure(records: Sequence[EvalRecord]) -> dict[str, tuple[Fraction, int]]:
    """F(c) and support n for every concept appearing in the records."""
    buckets: dict[str, list[Fraction]] = {}
    for r in records:
        for c in r.concepts:
            buckets.setdefault(c, []).append(r.fr)
    return {c: (_mean(v), len(v)) for c, v in buckets.items()}


def concept_profiles(
    records: Sequence[EvalRecord],
    recognition_log: Mapping[str, RecognitionCounts] | None = None,
    n_min: int = 10,
) -> list[ConceptProfile]:
    out = []
    for c, (F, n) in sorted(conditional_failure(records).items()):
        if n < n_min:
            continue
        R = None
        if recognition_log is not None and c in recognition_log:
            R = recognition_log[c].rate
        out.append(ConceptProfile(c, F, n, R, None if R is None else regime_for(R)))
    return out


# -- pairwise lift ---------------------------------------------------------------


def independence_baseline(fa: Fraction | float, fb: Fraction | float) -> Fraction:
    a, b = as_fraction(fa), as_fraction(fb)
    return a + b - a * b


def max_baseline(fa: Fraction | float, fb: Fraction | float) -> Fraction:
    return max(as_fraction(fa), as_fraction(fb))


def lift(observed: Fraction | float | str, baseline: Fraction | float | str) -> Fraction:
    return as_fraction(observed) - as_fraction(baseline)


def format_pct(x: Fraction | float, digits: int = 1, signed: bool = False) -> str:
    """Percentage with round-half-even at the requested precision, e.g. ``+13.6%``."""
    value = round(as_fraction(x) * 100, digits)
    text = f"{float(value):.{digits}f}%"
    return ("+" + text) if signed and value >= 0 else text


@dataclass(frozen=True)
class LiftEntry:
    pair: tuple[str, str]
    observed: Fraction
    baseline: Fraction
    lift: Fraction
    n: int

    def to_row(self) -> dict[str, Any]:
        return {
            "A": self.pair[0],
            "B": self.pair[1],
            "observed": float(self.observed),
            "baseline": float(self.baseline),
            "lift": float(self.lift),
            "n": self.n,
        }


def lift_table(
    records: Sequence[EvalRecord],
    n_min: int = 10,
    n_pair_min: int = 1,
    baseline: str = "independence",
) -> list[LiftEntry]:
    """Observed pair failure rate against a baseline built from atom rates."""
    if baseline not in ("independence", "max"):
        raise ValueError(f"unknown baseline {baseline!r}")
    base_fn = independence_baseline if baseline == "independence" else max_baseline
    atoms = conditional_failure(records)
    pairs: dict[tuple[str, str], list[Fraction]] = {}
    for r in records:
        for a, b in combinations(sorted(r.concepts), 2):
            pairs.setdefault((a, b), []).append(r.fr)
    out = []
    for (a, b), frs in pairs.items():
        if len(frs) < n_pair_min or atoms[a][1] < n_min or atoms[b][1] < n_min:
            continue
        observed = _mean(frs)
        base = base_fn(atoms[a][0], atoms[b][0])
        out.append(LiftEntry((a, b), observed, base, observed - base, len(frs)))
    out.sort(key=lambda e: (-abs(e.lift), e.pair))
    return out


# -- transfer ----------------------------------------------------------------------


@dataclass(frozen=True)
class TransferReport:
    n: int
    mean_target_fr: Fraction
    baseline_mfr: Fraction
    multiplier: float | None
    spearman: float | None
    buckets: tuple[tuple[str, int, Fraction], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "mean_target_fr": float(self.mean_target_fr),
            "baseline_mfr": float(self.baseline_mfr),
            "multiplier": self.multiplier,
            "spearman": self.spearman,
            "buckets": [{"source_fr": b, "n": n, "mean_target_fr": float(v)} for b, n, v in self.buckets],
        }


DEFAULT_BINS = (Fraction(0), Fraction(1, 5), Fraction(2, 5), Fraction(3, 5), Fraction(4, 5), Fraction(1))


def transfer_report(
    source_top: Sequence[EvalRecord],
    target_records: Sequence[EvalRecord],
    target_random_baseline: Fraction | float,
    bins: Sequence[Fraction] = DEFAULT_BINS,
) -> TransferReport:
    """How a source model's top failure modes fare on a target model."""
    if not source_top or not target_records:
        raise ValueError("transfer report needs source sets and target records")
    by_key = {r.key: r for r in target_records}
    missing = [s.key for s in source_top if s.key not in by_key]
    if missing:
        raise ValueError(f"source sets not evaluated on target: {missing[:3]}")
    src = [s.fr for s in source_top]
    tgt = [by_key[s.key].fr for s in source_top]
    mean_t = _mean(tgt)
    base = as_fraction(target_random_baseline)
    multiplier = float(mean_t / base) if base else None
    rho = None
    if len(src) >= 2 and len(set(src)) > 1 and len(set(tgt)) > 1:
        rho = float(spearmanr([float(v) for v in src], [float(v) for v in tgt]).statistic)
    buckets = []
    for i, (lo, hi) in enumerate(zip(bins, bins[1:])):
        last = i == len(bins) - 2
        vals = [t for s, t in zip(src, tgt) if lo <= s and (s <= hi if last else s < hi)]
        if vals:
            label = f"[{float(lo):.1f},{float(hi):.1f}{']' if last else ')'}"
            buckets.append((label, len(vals), _mean(vals)))
    return TransferReport(len(src), mean_t, base, multiplier, rho, tuple(buckets))


# -- tabular output ----------------------------------------------------------------


def write_csv(rows: Sequence[Mapping[str, Any]], path: str | Path, columns: Sequence[str] | None = None) -> None:
    cols = list(columns) if columns is not None else (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in cols})
