"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    n, title = props["criterion"], props["criterion_title"]
    if report.when == "call" or report.failed:
        status = "PASS" if report.passed and _CRITERIA.get(n, ("", "PASS"))[1] == "PASS" else "FAIL"
        if report.skipped:
            status = "SKIP"
        _CRITERIA[n] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}")
