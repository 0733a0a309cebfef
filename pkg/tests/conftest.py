import numpy as np
import pytest

from spire.envs import GridChain, PointChain, ScriptedExpert


@pytest.fixture
def grid2():
    return GridChain(k=2)


@pytest.fixture
def point2():
    return PointChain(k=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def drive_to_handoff(env, seed=0):
    """Reset ``env`` and run the planner prefix up to the first learned section."""
    from spire.planner import plan, run_prefix

    env.reset(seed)
    s, learned = run_prefix(plan(env.state, env.task, env.model), env.state, env.model)
    env.set_state(s)
    env.begin_section(learned.section)
    return learned.section


@pytest.fixture(scope="session")
def grid2_demos():
    from spire.imitation import collect_demos

    env = GridChain(k=2)
    return collect_demos(env, ScriptedExpert(env, 0.1, seed=0), 10, seed=0)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one PASS/FAIL line per acceptance criterion."""

    def report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
