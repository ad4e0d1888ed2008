"""Acceptance gate: one printed PASS/FAIL line per criterion.

The 21-run experiment matrix is cached in ``.acceptance_cache`` keyed by
config and package source; a cold run takes roughly two hours on one core.
``scripts/run_acceptance.py`` fills the cache and prints the same lines.
"""

import os
from pathlib import Path

import pytest

from conftest import ACCEPTANCE_LINES
from fedpoison import acceptance

CACHE = Path(os.environ.get("FEDPOISON_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".acceptance_cache"))


@pytest.fixture(scope="module")
def checks(tmp_path_factory, pytestconfig):
    results = acceptance.run_all(CACHE, tmp_path_factory.mktemp("accept"))
    lines = pytestconfig.stash.setdefault(ACCEPTANCE_LINES, [])
    for c in results:
        print(c.line())
        lines.append(c.line())
    return {c.number: c for c in results}


@pytest.mark.parametrize("number", range(1, 10))
def test_primary_criterion(checks, number):
    c = checks[number]
    assert c.passed, c.line()


def test_noniid_trend_is_reported(checks):
    c = checks[10]
    if not c.passed:
        import warnings

        warnings.warn(c.line())
    assert c.detail
