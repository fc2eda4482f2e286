"""Collects the acceptance verdicts and prints them at the end of the run."""

ACCEPTANCE_RESULTS = {}


def _line(number, title, passed, detail):
    line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {title}"
    return line + (f" ({detail})" if detail else "")


def record(number, title, passed, detail=""):
    ACCEPTANCE_RESULTS[number] = (title, passed, detail)
    return _line(number, title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(_line(number, *ACCEPTANCE_RESULTS[number]))
