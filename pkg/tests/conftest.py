import pytest

_CRITERIA: dict[int, str] = {}


class CriterionLog:
    def __init__(self, number: int):
        self.number = number

    def record(self, ok: bool, detail: str) -> bool:
        line = f"criterion {self.number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[self.number] = line
        print(line)
        return ok


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return CriterionLog(marker.args[0])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
