"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run."""

_lines: list[str] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    status = "PASS" if report.passed else "FAIL"
    detail = props.get("detail", "")
    runtime = props.get("runtime_s", report.duration)
    _lines.append(f"{status}  {props['criterion']}  ({runtime:.2f}s, limit {props['limit_s']}s){detail}")


def pytest_terminal_summary(terminalreporter):
    if _lines:
        terminalreporter.section("acceptance criteria")
        for line in _lines:
            terminalreporter.write_line(line)
