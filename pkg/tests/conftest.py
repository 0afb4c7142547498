import pytest

from fullpage.numeric_core import make_rng

# criterion number -> (passed, detail), filled by the acceptance tests
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return make_rng(1234)


def randomize(params, rng, scale=0.5):
    for v in params.values():
        v[...] = rng.normal(0.0, scale, v.shape)


class Verdict:
    def __init__(self, number):
        self.number = number
        self.done = False

    def check(self, passed: bool, detail: str):
        ACCEPTANCE[self.number] = (bool(passed), detail)
        self.done = True
        assert passed, f"criterion {self.number}: {detail}"


@pytest.fixture
def criterion(request):
    verdict = Verdict(request.node.get_closest_marker("criterion").args[0])
    yield verdict
    if not verdict.done:
        ACCEPTANCE[verdict.number] = (False, "did not complete")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
