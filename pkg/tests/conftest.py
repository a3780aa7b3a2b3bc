import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split("(")[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:<5} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(20240607)
