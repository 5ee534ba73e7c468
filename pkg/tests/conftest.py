import pytest

_CRITERIA: dict[int, list] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one part of an acceptance criterion: criterion(7, "b", ok, "psnr 21.6 dB")."""

    def record(number: int, part: str, passed: bool, detail: str) -> bool:
        _CRITERIA.setdefault(number, []).append((part, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        parts = _CRITERIA[number]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p + ': ' if p else ''}{'ok' if ok else 'FAIL'} {d}" for p, ok, d in parts)
        terminalreporter.write_line(f"{status} criterion {number:2d}  {detail}")
