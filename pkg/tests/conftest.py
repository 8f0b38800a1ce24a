import sys
from pathlib import Path

import pytest

# make the shared synthetic-road helpers importable from every test module
sys.path.insert(0, str(Path(__file__).parent))


def pytest_runtest_logreport(report):
    """Print one pass/fail line per acceptance criterion."""
    if report.when != "call":
        return
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    status = "PASS" if report.passed else "FAIL"
    print(f"\n[ACCEPTANCE] {name}: {status}", flush=True)
