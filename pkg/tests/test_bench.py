from __future__ import annotations

import pytest

from vfa.bench import REFERENCE_MS, run_bench
from vfa.errors import InvalidParameter


@pytest.fixture(scope="module")
def report():
    return run_bench(n=100, live=False)


def test_four_reference_rows(report):
    assert [r.name for r in report.rows] == list(REFERENCE_MS)
    for row in report.rows:
        assert row.mean_ms > 0 and row.std_ms >= 0
        assert (row.reference_mean_ms, row.reference_std_ms) == REFERENCE_MS[row.name]


def test_table_mentions_caveat(report):
    table = report.format_table()
    assert "not expected to reproduce" in table
    assert "n = 100" in table
    assert report.to_json()["environment"]["sync_transport"] == "in-process"


def test_hardened_row():
    calls = []
    rep = run_bench(n=100, live=False, hardened_unlock=lambda: calls.append(1))
    assert rep.row("hardened_unlock").reference_mean_ms is None
    assert len(calls) == 100


def test_too_few_runs():
    with pytest.raises(InvalidParameter):
        run_bench(n=10)
