import pytest

_lines = []
_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains full desk-scale models (minutes per run)")


@pytest.fixture
def acceptance_log(request):
    def log(label, detail):
        _lines.append((request.node.name, label, detail))
    return log


def pytest_runtest_logreport(report):
    if "test_acceptance" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        _outcomes[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance")
    for name, outcome in _outcomes.items():
        tr.write_line(f"{'PASS' if outcome == 'passed' else outcome.upper():7s} {name}")
        for test, label, detail in _lines:
            if test == name:
                tr.write_line(f"          {label}: {detail}")
