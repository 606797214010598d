import pytest

_ACCEPTANCE = {}


class _Recorder:
    def __call__(self, number: int, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)


@pytest.fixture(scope="session")
def acceptance():
    """Records one pass/fail line per acceptance criterion."""
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
