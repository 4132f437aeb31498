"""Shared pytest hooks: collects acceptance-check verdicts for the summary."""

_CRITERIA = []


def record_criterion(name, passed, detail=""):
    """Register an acceptance-check outcome for the end-of-run summary.

    Called by tests in test_acceptance.py; each call produces one
    ``[PASS]``/``[FAIL]`` line after the normal pytest report.
    """
    _CRITERIA.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        tag = "PASS" if passed else "FAIL"
        line = f"[{tag}] {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
