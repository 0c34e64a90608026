import pytest

from sgxmem.config import SimConfig
from sgxmem.engine import Step
from sgxmem.victims import VictimProgram

# criterion number -> (title, passed, detail)
_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        _CRITERIA[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance summary line."""
    def add(text: str):
        request.node.user_properties.append(("detail", text))
    return add


class ListVictim(VictimProgram):
    """A victim that replays a fixed step list over given pages."""

    name = "list"

    def __init__(self, steps, pages, starts_in_enclave=True):
        super().__init__(None)
        self._steps = list(steps)
        self._pages = list(pages)
        self.starts_in_enclave = starts_in_enclave

    def pages(self):
        return [(va, nx) for va, nx in self._pages]

    def steps(self):
        return iter(self._steps)


def reads(vas, cycles=40, op="read"):
    return [Step(op, va, cycles) for va in vas]


@pytest.fixture
def quiet():
    return SimConfig().noiseless()
