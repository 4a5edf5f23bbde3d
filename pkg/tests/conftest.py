import hashlib
import json
from pathlib import Path

import pytest

VERDICTS: list[str] = []

SOURCES = ("grid.py", "dynamics.py", "solver.py", "safety.py")


def record_verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bundle_cache(pytestconfig):
    """Directory for solved bundles, keyed by their inputs and the solver sources."""
    import modereach
    src = Path(modereach.__file__).parent
    h = hashlib.sha256()
    for name in SOURCES:
        h.update((src / name).read_bytes())
    code = h.hexdigest()[:16]
    root = Path(pytestconfig.cache.mkdir("modereach-bundles"))

    def path_for(key: dict) -> Path:
        digest = hashlib.sha256((json.dumps(key, sort_keys=True) + code).encode()).hexdigest()[:24]
        return root / digest

    return path_for
