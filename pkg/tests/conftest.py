import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[k])
