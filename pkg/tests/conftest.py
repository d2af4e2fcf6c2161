import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from _support import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[n]
        ok = all(c[1] for c in checks)
        failed = [c[0] for c in checks if not c[1]]
        tail = f" (failed: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} [{len(checks)} checks]{tail}")
