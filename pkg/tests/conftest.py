"""Shared pytest wiring: the acceptance suite records one line per
criterion and this hook prints them at the end of the run."""

ACCEPTANCE_RESULTS = []


def record_criterion(number, name, passed, detail=""):
    ACCEPTANCE_RESULTS.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number:>2}: {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
