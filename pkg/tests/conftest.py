from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def configs_dir():
    return CONFIGS


@pytest.fixture
def report_criterion(request):
    """Record a criterion verdict; the lines are echoed in the terminal summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    def report(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[n] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if store:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
