import pytest

_ACCEPTANCE: dict[int, str] = {}


class Recorder:
    def __call__(self, number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line


@pytest.fixture
def acceptance():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
