import pytest

from helpers import ACCEPTANCE
from xtm.synthetic import make_synthetic


@pytest.fixture(scope="session")
def synth():
    return make_synthetic()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
