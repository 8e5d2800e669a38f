import pytest

_PARTS: dict[int, list[tuple[bool, str]]] = {}


def _line(number: int) -> str:
    parts = _PARTS[number]
    ok = all(p[0] for p in parts)
    return f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: " + "; ".join(p[1] for p in parts)


class Verdict:
    """Collects one pass/fail line per acceptance criterion."""

    def check(self, number: int, ok: bool, detail: str) -> None:
        _PARTS.setdefault(number, []).append((bool(ok), detail))
        print(_line(number))
        assert ok, f"criterion {number}: {detail}"


@pytest.fixture(scope="session")
def verdict():
    return Verdict()


def pytest_terminal_summary(terminalreporter):
    if not _PARTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_PARTS):
        terminalreporter.write_line(_line(n))
