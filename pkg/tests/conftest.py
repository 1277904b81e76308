import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """``record(n, passed, detail)`` registers one acceptance verdict for the summary."""

    def _record(n: int, passed: bool, detail: str = "") -> None:
        prev = _CRITERIA.get(n)
        if prev is not None:
            passed = passed and prev[0]
            detail = f"{prev[1]}; {detail}" if detail else prev[1]
        _CRITERIA[n] = (bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
