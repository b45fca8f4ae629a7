"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines.
"""

import pytest

from wicdistil.selftest import run_check

CRITERIA = [
    ("1", "gradients"),
    ("2", "loss_formulas"),
    ("3", "frozen_provider"),
    ("4", "overfit"),
    ("5", "alignment"),
    ("6", "filters"),
    ("7", "metrics"),
    ("8", "layer_policy"),
    ("9", "end_to_end"),
    ("10", "formats"),
]


@pytest.mark.parametrize("number,name", CRITERIA, ids=[n for _, n in CRITERIA])
def test_criterion(number, name, capsys):
    res = run_check(name)
    with capsys.disabled():
        print(f"\ncriterion {number:>2} {res.line()}")
    assert res.passed, res.detail
