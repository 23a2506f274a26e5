import sys
from pathlib import Path

import pytest

# Shared oracles live next to the tests.
sys.path.insert(0, str(Path(__file__).parent))

# (number, title, passed, detail) for each acceptance criterion that ran
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or (rep.when == "setup" and rep.failed)):
        return
    detail = dict(item.user_properties).get("detail", "")
    ACCEPTANCE.append((mark.args[0], mark.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
