"""The ten acceptance criteria at full replication counts.

Each test prints one PASS/FAIL line plus its checks; the lines are repeated in
the terminal summary.
"""

import pytest

from fracperc import acceptance

LINES = []


@pytest.mark.parametrize("number", sorted(acceptance.CRITERIA))
def test_criterion(number):
    res = acceptance.run_criterion(number, "full")
    LINES.append(res.line())
    print(res.line())
    for label, ok, detail in res.checks:
        print(f"  [{'ok' if ok else 'FAIL'}] {label}: {detail}")
    assert res.passed, res.line()
