import pytest

_RESULTS: list[str] = []


class Recorder:
    def __call__(self, name: str, passed: bool | None, detail: str = "") -> None:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        _RESULTS.append(f"{status}  {name}: {detail}")


@pytest.fixture(scope="session")
def acceptance():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
