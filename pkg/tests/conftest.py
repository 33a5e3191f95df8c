import pytest

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion."""

    def record(key: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE[key] = (bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
        return bool(ok)

    return record


def _order(key: str):
    num = "".join(ch for ch in key if ch.isdigit())
    return (int(num) if num else 0, key)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=_order):
        ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key:<4} {detail}")
