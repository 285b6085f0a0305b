"""Acceptance suite: every criterion at its stated tolerance and runtime limit.

Run directly (``python3 tests/test_acceptance.py``) for a plain PASS/FAIL
listing, or through pytest where each criterion is its own test.
"""

import sys

import pytest

from blocksolve.checks import default_fixture_dir, suite_checks

CHECKS = suite_checks("all", default_fixture_dir())

pytestmark = pytest.mark.slow


@pytest.mark.parametrize("label,check", CHECKS, ids=[label for label, _ in CHECKS])
def test_criterion(label, check, capsys):
    res = check()
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()


if __name__ == "__main__":
    failed = 0
    for label, check in CHECKS:
        res = check()
        print(res.line(), flush=True)
        failed += not res.passed
    print(f"{len(CHECKS) - failed}/{len(CHECKS)} criteria passed")
    sys.exit(1 if failed else 0)
