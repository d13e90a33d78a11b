import sys


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results is None or not results.lines():
        return
    terminalreporter.section("acceptance criteria")
    for line in results.lines():
        terminalreporter.write_line(line)
