import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tpdg.lcvx import build_socp, extract_tight_constraints  # noqa: E402
from tpdg.problem import MissionConfig, reference_theta  # noqa: E402
from tpdg.solver import full_solve  # noqa: E402


@pytest.fixture(scope="session")
def mission():
    return MissionConfig()


@pytest.fixture(scope="session")
def ref_params():
    return reference_theta()


@pytest.fixture(scope="session")
def ref_full(mission, ref_params):
    """Free-time optimum of the reference instance."""
    res = full_solve(mission, ref_params)
    assert res.optimal
    return res


@pytest.fixture(scope="session")
def ref_socp(mission, ref_params, ref_full):
    return build_socp(mission, ref_params, ref_full.t_f)


@pytest.fixture(scope="session")
def ref_tau(ref_socp, ref_full):
    return extract_tight_constraints(ref_socp, ref_full)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
