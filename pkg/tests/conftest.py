import os
import sys
from pathlib import Path

import pytest

from ecglin import synthetic


def _mitdb_dir() -> Path | None:
    for var in ("MITDB_DIR", "ECG_DATA_DIR"):
        val = os.environ.get(var)
        if val and (Path(val) / "100.hea").exists():
            return Path(val)
    return None


@pytest.fixture(scope="session")
def mitdb_dir():
    d = _mitdb_dir()
    if d is None:
        pytest.skip("MIT-BIH data not available (set MITDB_DIR to a directory holding 100.hea ...)")
    return d


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """Small synthetic WFDB corpus shared across tests."""
    d = tmp_path_factory.mktemp("synth")
    names = synthetic.write_corpus(d, n_records=6, seconds=90, seed=11)
    return d, names


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.TITLES):
        status, detail = mod.RESULTS.get(n, ("NOT RUN", ""))
        terminalreporter.write_line(f"criterion {n} [{status}] {mod.TITLES[n]}: {detail}")
