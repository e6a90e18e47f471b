"""Budgeted search for compositional failure modes of decision models.

A catalog of scene concepts defines the search space; a rule-based oracle labels
the expected answer for each composed scene; a target model is queried several
times per concept set and the failure rate drives Random, Beam Search (MMR) or
GP Thompson sampling searches.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .catalog import Catalog, bundled_catalog, canonical_key, check_validity, load_catalog, load_catalog_file
from .evaluator import BudgetLedger, EvalRecord, Evaluator, SyntheticTarget, load_scenario
from .metrics import summarize
from .oracle import bundled_oracle, ground_truth, load_oracle
from .scene import build_anchor
from .search import SearchConfig, SearchResult, run_search

__all__ = [
    "__version__",
    "BudgetLedger",
    "Catalog",
    "EvalRecord",
    "Evaluator",
    "SearchConfig",
    "SearchResult",
    "SyntheticTarget",
    "build_anchor",
    "bundled_catalog",
    "bundled_oracle",
    "canonical_key",
    "check_validity",
    "ground_truth",
    "load_catalog",
    "load_catalog_file",
    "load_oracle",
    "load_scenario",
    "run_search",
    "summarize",
]
