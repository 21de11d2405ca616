import numpy as np
import pytest

from mmgdispatch.domain import TABLE1, Scenario, bundled_scenario_path, load_scenario


@pytest.fixture(scope="session")
def bundled_scenario():
    return load_scenario(bundled_scenario_path())


def make_scenario(load, wt, pv, price_mg, buy, sell, params=TABLE1, dt=1.0):
    return Scenario(load=np.atleast_2d(load), p_wt=np.atleast_2d(wt), p_pv=np.atleast_2d(pv),
                    price_mg=np.atleast_1d(price_mg), price_grid_buy=np.atleast_1d(buy),
                    price_grid_sell=np.atleast_1d(sell), params=params, dt=dt)


@pytest.fixture
def two_step_scenario():
    """Two microgrids, two steps, default parameters."""
    return make_scenario(load=[[300.0, 250.0], [100.0, 120.0]],
                         wt=[[50.0, 40.0], [150.0, 160.0]],
                         pv=[[20.0, 10.0], [80.0, 60.0]],
                         price_mg=[0.8, 0.6], buy=[1.0, 0.9], sell=[0.3, 0.3])


# --- acceptance report ---------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when != "call" and not report.failed:
        return
    name = report.nodeid.split("::")[-1][len("test_criterion_"):]
    num, _, label = name.partition("_")
    detail = dict(report.user_properties).get("detail", "")
    outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _CRITERIA[int(num)] = (outcome, label.replace("_", " "), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        outcome, label, detail = _CRITERIA[num]
        line = f"criterion {num:2d} {outcome}: {label}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
