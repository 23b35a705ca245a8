"""Make the shared oracle helpers importable from every test module, and
print the acceptance-criteria verdicts in the terminal summary."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.format_result_lines():
        terminalreporter.write_line(line)
