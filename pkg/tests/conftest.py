import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(acceptance_log.RESULTS, key=lambda k: int(k.split()[0])):
        passed, detail = acceptance_log.RESULTS[name]
        terminalreporter.write_line(f"criterion {name}: {'PASS' if passed else 'FAIL'} | {detail}")
