import pytest

# criterion number -> list of (passed, detail); filled by the acceptance tests
_VERDICTS: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def verdict():
    """Record one part of an acceptance criterion; returns ``passed`` so tests can assert on it."""

    def record(criterion: int, passed: bool, detail: str) -> bool:
        passed = bool(passed)
        _VERDICTS.setdefault(criterion, []).append((passed, detail))
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_VERDICTS):
        parts = _VERDICTS[k]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
