import re

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for nodeid, outcome in sorted(_ACCEPTANCE.items()):
        m = re.search(r"test_(\d+)_(\w+)$", nodeid)
        number, name = (int(m.group(1)), m.group(2).replace("_", " ")) if m else (0, nodeid)
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"acceptance {number:2d} {name}: {verdict}")
