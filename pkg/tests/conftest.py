"""Collects acceptance verdicts and prints one line per criterion at the end."""

VERDICTS = {}


def record(number: int, title: str, passed: bool, detail: str):
    VERDICTS[number] = (title, passed, detail)
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        title, passed, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
