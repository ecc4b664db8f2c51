import json
from pathlib import Path

import pytest

CRITERIA: dict[int, tuple[bool, str]] = {}
RESULTS_FILE = Path(__file__).resolve().parent.parent / "acceptance_results.json"


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line, then asserts ``ok``."""
    def record(number: int, ok: bool, detail: str) -> None:
        CRITERIA[number] = (bool(ok), detail)
        assert ok, f"criterion {number} failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    previous = json.loads(RESULTS_FILE.read_text()) if RESULTS_FILE.is_file() else {}
    previous.update({str(n): {"pass": ok, "detail": d} for n, (ok, d) in CRITERIA.items()})
    RESULTS_FILE.write_text(json.dumps(previous, indent=2, sort_keys=True))
