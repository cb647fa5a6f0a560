import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts, one line per criterion, after the run."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
