"""Collects the acceptance verdicts and prints one line per criterion."""

_VERDICTS = []


def pytest_runtest_makereport(item, call):
    if call.when != "call":
        return
    props = dict(item.user_properties)
    if "criterion" in props:
        passed = call.excinfo is None
        _VERDICTS.append((props["criterion"], props.get("title", item.name), passed, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_VERDICTS):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {title}"
        terminalreporter.write_line(f"{line} | {detail}" if detail else line)
