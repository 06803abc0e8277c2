import pytest

CRITERIA = {
    1: "loss identities",
    2: "variance map fidelity",
    3: "loss gradient checks",
    4: "metric oracle equivalence",
    5: "self-training bookkeeping",
    6: "fusion never lowers lesion recall",
    7: "directional method ordering",
    8: "uncertainty flags false positives",
    9: "iteration curve rises to its plateau",
    10: "end-to-end determinism",
}

_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or not rep.passed:
        _outcomes.setdefault(marker.args[0], []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        seen = _outcomes.get(n)
        if not seen:
            status = "NOT RUN"
        elif all(o == "passed" for o in seen):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {name}")
