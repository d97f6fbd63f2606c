import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from temarket.config import bundled, load_config  # noqa: E402
from temarket.reporting import run_scenario  # noqa: E402

# criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def day_config():
    return load_config(bundled("day33.yaml"))


@pytest.fixture(scope="session")
def day_run(day_config):
    """The bundled 33-bus, 48-step pipeline, solved once per session."""
    t0 = time.perf_counter()
    bundle = run_scenario(day_config)
    return bundle, time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
