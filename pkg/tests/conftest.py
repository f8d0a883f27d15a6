import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


FIXTURES = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "fixtures")


class Bundle:
    """Problem, template, model, cost and synthesis for one fixture file."""

    def __init__(self, name):
        from cctmpc import config
        from cctmpc.synthesis import TubeModel, synthesize

        self.path = os.path.join(FIXTURES, f"{name}.json")
        self.spec = config.load_problem(self.path)
        self.template, self.vc = config.build_template(self.spec)
        self.system = self.spec.system
        self.model = TubeModel.build(self.template, self.vc, self.system)
        self.cost = config.build_cost(self.spec, self.vc, self.model.nu)
        self.synth = synthesize(self.model, self.cost, self.spec.beta,
                                steady_fallback=self.spec.steady_fallback)


_BUNDLES = {}


def bundle(name) -> Bundle:
    if name not in _BUNDLES:
        _BUNDLES[name] = Bundle(name)
    return _BUNDLES[name]


@pytest.fixture(scope="session")
def ex1():
    return bundle("example1")


@pytest.fixture(scope="session")
def ex2():
    return bundle("example2")


@pytest.fixture(scope="session")
def ex3():
    return bundle("example3")


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
