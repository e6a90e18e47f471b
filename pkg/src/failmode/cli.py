"""Command-line orchestration: search, phase-2 validation, transfer and ablation sweeps.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import statistics
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .catalog import Catalog, CatalogError, bundled_catalog, canonical_key, load_catalog_file
from .evaluator import (
    BudgetLedger,
    EvalRecord,
    Evaluator,
    SyntheticTarget,
    ReplayTarget,
    SubprocessTarget,
    bundled_scenario,
    load_scenario_file,
    probe_recognition,
    read_records,
    write_records,
)
from .gp import KernelSpec
from .metrics import concept_profiles, lift_table, summarize, transfer_report, write_csv
from .oracle import Oracle, OracleError, bundled_oracle, load_oracle_file
from .search import SearchConfig, SearchResult, run_search
from .seeding import STREAMS, stream

log = logging.getLogger("failmode")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DOMAINS = ("driving", "indoor", "synthetic")


class UsageError(Exception):
    """Bad flags or configuration; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with status 2
        raise UsageError(message)


# -- run settings ----------------------------------------------------------------


@dataclass
class Components:
    catalog: Catalog
    oracle: Oracle
    target: Any


def _load_components(settings: dict[str, Any]) -> Components:
    domain = settings["domain"]
    if settings.get("catalog"):
        catalog = load_catalog_file(settings["catalog"])
    else:
        if domain not in DOMAINS:
            raise UsageError(f"no bundled catalog for domain {domain!r}; pass --catalog")
        catalog = bundled_catalog(domain)
    oracle = load_oracle_file(settings["rules"]) if settings.get("rules") else bundled_oracle(catalog.domain)
    target = make_target(settings["target"], catalog, oracle, settings["seed"])
    return Components(catalog, oracle, target)


def make_target(spec: str, catalog: Catalog, oracle: Oracle, seed: int) -> Any:
    """``synthetic[:scenario.yaml]``, ``replay:records.log`` or ``subprocess:command``."""
    kind, _, arg = spec.partition(":")
    if kind == "synthetic":
        scenario = load_scenario_file(arg) if arg else bundled_scenario(catalog.domain)
        return SyntheticTarget(scenario, catalog, oracle, seed)
    if kind == "replay":
        if not arg:
            raise UsageError("replay target needs a log path (replay:PATH)")
        return ReplayTarget.from_log(arg)
    if kind == "subprocess":
        if not arg:
            raise UsageError("subprocess target needs a command (subprocess:CMD)")
        return SubprocessTarget(arg)
    raise UsageError(f"unknown target spec {spec!r}")


def _close(comps: Components) -> None:
    close = getattr(comps.target, "close", None)
    if close is not None:
        close()


def _search_config(settings: dict[str, Any]) -> SearchConfig:
    try:
        return SearchConfig(
            algo=settings["algo"],
            B=settings["budget"],
            m=settings["samples"],
            k=settings["beam_width"],
            D=settings["max_depth"],
            lam=settings["lam"],
            tau=settings["tau"],
            B_BS=min(settings["beam_budget"], settings["budget"]),
            pool_size=settings["pool_size"],
            seed=settings["seed"],
            kernel=KernelSpec(settings["kernel"], settings["noise"], settings["lengthscale"]),
            noise_refit=settings["noise_refit"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


SEARCH_KEYS = (
    "domain", "catalog", "rules", "target", "algo", "budget", "samples", "beam_width", "max_depth",
    "lam", "tau", "beam_budget", "pool_size", "kernel", "noise", "lengthscale", "noise_refit", "seed",
)


def _add_search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of flag defaults (e.g. a config.snapshot)")
    p.add_argument("--domain", default="driving", help="bundled domain: driving, indoor or synthetic")
    p.add_argument("--catalog", help="catalog YAML (default: bundled for --domain)")
    p.add_argument("--rules", help="oracle rule YAML (default: bundled for the catalog's domain)")
    p.add_argument("--target", default="synthetic", help="synthetic[:FILE] | replay:FILE | subprocess:CMD")
    p.add_argument("--algo", default="gpts", choices=("random", "beam", "gpts"))
    p.add_argument("--budget", type=int, default=1000, help="total inference budget B")
    p.add_argument("--samples", type=int, default=5, help="observations per set m")
    p.add_argument("--beam-width", dest="beam_width", type=int, default=5)
    p.add_argument("--max-depth", dest="max_depth", type=int, default=5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.25, help="MMR diversity weight")
    p.add_argument("--tau", type=float, default=0.6, help="failure threshold")
    p.add_argument("--beam-budget", dest="beam_budget", type=int, default=500, help="GPTS beam-phase budget")
    p.add_argument("--pool-size", dest="pool_size", type=int, default=256)
    p.add_argument("--kernel", default="dot", choices=("dot", "rbf"))
    p.add_argument("--noise", type=float, default=0.05, help="white-noise variance")
    p.add_argument("--lengthscale", type=float, default=1.0, help="RBF lengthscale")
    p.add_argument("--noise-refit", dest="noise_refit", action="store_true", help="pick noise by marginal likelihood")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="failmode", description="Budgeted search for compositional failure modes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ps = sub.add_parser("search", help="run one search and write its records and reports")
    _add_search_flags(ps)
    ps.add_argument("--out", required=True, help="output directory")

    pv = sub.add_parser("validate", help="re-evaluate a run's top failure modes with more samples")
    pv.add_argument("run_dir")
    pv.add_argument("--top-n", dest="top_n", type=int, default=10)
    pv.add_argument("--samples", type=int, default=20)
    pv.add_argument("--target", help="override the run's target spec")
    pv.add_argument("--seed", type=int, help="override the run's seed")

    pt = sub.add_parser("transfer", help="evaluate a run's top failure modes on another target")
    pt.add_argument("run_dir")
    pt.add_argument("--target", required=True, help="target spec for the receiving model")
    pt.add_argument("--top-n", dest="top_n", type=int, default=10)
    pt.add_argument("--samples", type=int, default=20)
    pt.add_argument("--baseline-sets", dest="baseline_sets", type=int, default=200,
                    help="random-search sets on the target for the baseline MFR (0 to skip)")
    pt.add_argument("--baseline-mfr", dest="baseline_mfr", type=float, help="use this baseline MFR instead")
    pt.add_argument("--out", help="output directory (default: <run_dir>/transfer)")

    pw = sub.add_parser("sweep", help="one search per grid point plus a comparison table")
    _add_search_flags(pw)
    pw.add_argument("--grid", action="append", default=[], metavar="NAME=V1,V2",
                    help="parameter values, e.g. beam_width=1,5,10 (repeatable)")
    pw.add_argument("--out", required=True)
    return parser


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        path = Path(cfg_path)
        if not path.is_file():
            raise UsageError(f"config not found: {path}")
        doc = yaml.safe_load(path.read_text("utf-8")) or {}
        if not isinstance(doc, dict):
            raise UsageError("config file must be a mapping")
        known = {k: v for k, v in doc.items() if k in SEARCH_KEYS}
        sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
        sub.set_defaults(**known)
        args = parser.parse_args(argv)
    return args


# -- output helpers --------------------------------------------------------------


def _write_jsonl(rows: Sequence[dict[str, Any]], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _write_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _record_rows(records: Sequence[EvalRecord]) -> list[dict[str, Any]]:
    return [
        {"set": " ".join(r.key), "fr": float(r.fr), "failures": r.failures, "m": r.m,
         "refusals": r.refusals, "phase": r.phase}
        for r in records
    ]


def _snapshot(settings: dict[str, Any]) -> dict[str, Any]:
    snap = {k: settings[k] for k in SEARCH_KEYS}
    snap["version"] = __version__
    snap["seed_streams"] = list(STREAMS)
    return snap


def execute_search(settings: dict[str, Any], out: Path) -> tuple[SearchResult, dict[str, Any]]:
    cfg = _search_config(settings)
    comps = _load_components(settings)
    evaluator = Evaluator(comps.catalog, comps.oracle, comps.target, root_seed=cfg.seed)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # surfaced through result.warnings
            result = run_search(cfg, comps.catalog, evaluator)
    finally:
        _close(comps)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(yaml.safe_dump(_snapshot(settings), sort_keys=False), "utf-8")
    _write_jsonl(result.trace, out / "trace.log")
    write_records(result.all_candidates, out / "records.log")

    summary = summarize(result.all_candidates, cfg.tau)
    doc = {
        "algo": cfg.algo.value,
        **summary.to_dict(),
        "spent": result.spent,
        "unspent": result.unspent,
        "skipped": len(result.skipped),
        "warnings": result.warnings,
        "config": cfg.to_dict(),
    }
    _write_json(doc, out / "summary.json")
    write_csv(_record_rows(result.all_candidates), out / "summary.csv",
              ["set", "fr", "failures", "m", "refusals", "phase"])

    by_key = {r.key: r for r in result.all_candidates}
    fm_rows = [{"set": " ".join(canonical_key(s)), "fr": float(by_key[canonical_key(s)].fr)}
               for s in result.failure_modes]
    _write_json([{"set": list(canonical_key(s)), "fr": float(by_key[canonical_key(s)].fr)}
                 for s in result.failure_modes], out / "failure_modes.json")
    write_csv(fm_rows, out / "failure_modes.csv", ["set", "fr"])

    recognition = None
    scenario = getattr(comps.target, "scenario", None)
    if scenario is not None and scenario.visibility:
        seen = sorted({c for r in result.all_candidates for c in r.concepts})
        recognition = probe_recognition(comps.target, seen, 10, cfg.seed)
    profiles = concept_profiles(result.all_candidates, recognition)
    write_csv([p.to_row() for p in profiles], out / "profiles.csv", ["concept", "F", "R", "n", "regime"])
    write_csv([e.to_row() for e in lift_table(result.all_candidates)], out / "lift.csv",
              ["A", "B", "observed", "baseline", "lift", "n"])
    return result, doc


def _settings_from_args(args: argparse.Namespace) -> dict[str, Any]:
    return {k: getattr(args, k) for k in SEARCH_KEYS}


def cmd_search(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args)
    _, doc = execute_search(settings, Path(args.out))
    print(f"{doc['algo']}: {doc['n_sets']} sets, {doc['n_failure_modes']} failure modes, "
          f"PFM {doc['pfm']:.3f}, MFR {doc['mfr']:.3f}, spent {doc['spent']}")
    for w in doc["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


# -- validate / transfer ---------------------------------------------------------


def _load_run(run_dir: Path) -> tuple[dict[str, Any], list[EvalRecord]]:
    snap_path = run_dir / "config.snapshot"
    if not snap_path.is_file():
        raise UsageError(f"not a run directory (no config.snapshot): {run_dir}")
    settings = yaml.safe_load(snap_path.read_text("utf-8"))
    return settings, read_records(run_dir / "records.log")


def select_top(records: Sequence[EvalRecord], n: int, seed: int) -> list[EvalRecord]:
    """Top-n by failure rate; sets tied at the cut are drawn uniformly (seeded)."""
    ranked = sorted(records, key=lambda r: (-r.fr, r.key))
    if len(ranked) <= n:
        return ranked
    cut = ranked[n - 1].fr
    above = [r for r in ranked if r.fr > cut]
    tied = [r for r in ranked if r.fr == cut]
    rng = stream(seed, "validate", "ties")
    picks = rng.choice(len(tied), size=n - len(above), replace=False)
    return above + [tied[i] for i in sorted(picks)]


def revalidate(comps: Components, sets: Sequence[EvalRecord], m: int, seed: int) -> list[EvalRecord]:
    evaluator = Evaluator(comps.catalog, comps.oracle, comps.target, root_seed=seed)
    ledger = BudgetLedger(len(sets) * m)
    return [evaluator.evaluate(r.concepts, m, ledger, phase="validate", stream="validate") for r in sets]


def validation_stats(records: Sequence[EvalRecord], high: float = 0.8) -> dict[str, Any]:
    frs = [float(r.fr) for r in records]
    return {
        "n": len(frs),
        "mean_fr": statistics.fmean(frs) if frs else None,
        "std_fr": statistics.pstdev(frs) if frs else None,
        "n_high": sum(r.fr >= high for r in records),
        "high_threshold": high,
    }


def cmd_validate(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    settings, records = _load_run(run_dir)
    if args.target:
        settings["target"] = args.target
    if args.seed is not None:
        settings["seed"] = args.seed
    comps = _load_components(settings)
    if len(records) < args.top_n:
        print(f"warning: only {len(records)} candidates; validating all of them", file=sys.stderr)
    top = select_top(records, args.top_n, settings["seed"])
    try:
        validated = revalidate(comps, top, args.samples, settings["seed"])
    finally:
        _close(comps)
    stats = validation_stats(validated)
    stats["samples"] = args.samples
    stats["sets"] = [{"set": list(v.key), "search_fr": float(t.fr), "validated_fr": float(v.fr)}
                     for t, v in zip(top, validated)]
    _write_json(stats, run_dir / "validate.json")
    write_records(validated, run_dir / "validate.log")
    print(f"validated {stats['n']} sets at m={args.samples}: mean FR {100 * stats['mean_fr']:.1f}% "
          f"± {100 * stats['std_fr']:.1f}, {stats['n_high']}/{stats['n']} at >= 80%")
    return EXIT_OK


def cmd_transfer(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    settings, records = _load_run(run_dir)
    out = Path(args.out) if args.out else run_dir / "transfer"
    source = _load_components(settings)
    target_settings = dict(settings, target=args.target)
    target = _load_components(target_settings)
    top = select_top(records, args.top_n, settings["seed"])
    try:
        source_val = revalidate(source, top, args.samples, settings["seed"])
        target_val = revalidate(target, top, args.samples, settings["seed"])
    finally:
        _close(source)
        _close(target)
    if args.baseline_mfr is not None:
        baseline = args.baseline_mfr
    elif args.baseline_sets > 0:
        base_settings = dict(target_settings, algo="random", budget=args.baseline_sets * settings["samples"])
        result, _ = execute_search(base_settings, out / "baseline")
        baseline = summarize(result.all_candidates, settings["tau"]).mfr
    else:
        raise UsageError("transfer needs --baseline-sets > 0 or --baseline-mfr")
    report = transfer_report(source_val, target_val, baseline)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["sets"] = [{"set": list(s.key), "source_fr": float(s.fr), "target_fr": float(t.fr)}
                   for s, t in zip(source_val, target_val)]
    _write_json(doc, out / "transfer.json")
    write_csv(doc["sets"] and [{"set": " ".join(d["set"]), "source_fr": d["source_fr"], "target_fr": d["target_fr"]}
                               for d in doc["sets"]], out / "transfer.csv", ["set", "source_fr", "target_fr"])
    mult = "n/a" if report.multiplier is None else f"{report.multiplier:.1f}x"
    print(f"transfer of {report.n} sets: mean target FR {100 * float(report.mean_target_fr):.1f}% ({mult} baseline)")
    return EXIT_OK


# -- sweep -------------------------------------------------------------------------

_GRID_ALIASES = {
    "k": "beam_width", "beam-width": "beam_width", "B_BS": "beam_budget", "beam-budget": "beam_budget",
    "m": "samples", "B": "budget", "D": "max_depth", "max-depth": "max_depth", "lambda": "lam",
    "pool-size": "pool_size",
}


def parse_grid(items: Sequence[str]) -> dict[str, list[Any]]:
    grid: dict[str, list[Any]] = {}
    for item in items:
        name, sep, values = item.partition("=")
        if not sep or not values:
            raise UsageError(f"grid entry must look like NAME=V1,V2: {item!r}")
        key = _GRID_ALIASES.get(name.strip(), name.strip().replace("-", "_"))
        if key not in SEARCH_KEYS or key in ("domain", "catalog", "rules", "target"):
            raise UsageError(f"cannot sweep over {name!r}")
        grid[key] = [yaml.safe_load(v) for v in values.split(",")]
    if not grid:
        raise UsageError("sweep needs at least one --grid entry")
    return grid


def cmd_sweep(args: argparse.Namespace) -> int:
    grid = parse_grid(args.grid)
    base = _settings_from_args(args)
    out = Path(args.out)
    names = list(grid)
    rows = []
    for values in itertools.product(*(grid[n] for n in names)):
        point = dict(zip(names, values))
        settings = dict(base, **point)
        label = "_".join(f"{n}={v}" for n, v in point.items())
        _, doc = execute_search(settings, out / label)
        rows.append({**point, **{k: doc[k] for k in ("n_sets", "n_failure_modes", "pfm", "mfr", "div", "spent")}})
    out.mkdir(parents=True, exist_ok=True)
    _write_json(rows, out / "sweep.json")
    write_csv(rows, out / "sweep.csv", names + ["n_sets", "n_failure_modes", "pfm", "mfr", "div", "spent"])
    for row in rows:
        print("  ".join(f"{k}={row[k]}" for k in names),
              f"sets={row['n_sets']} FM={row['n_failure_modes']} PFM={row['pfm']:.3f} MFR={row['mfr']:.3f}")
    return EXIT_OK


COMMANDS = {"search": cmd_search, "validate": cmd_validate, "transfer": cmd_transfer, "sweep": cmd_sweep}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(f"failmode: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, CatalogError, OracleError, FileNotFoundError) as exc:
        print(f"failmode: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any module failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"failmode: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
