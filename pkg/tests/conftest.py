import sys


def pytest_terminal_summary(terminalreporter):
    rig = sys.modules.get("rig")
    if rig is None or not rig.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(rig.REPORT, key=lambda s: int(s.split()[0][2:])):
        terminalreporter.write_line(line)
