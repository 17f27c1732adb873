from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# acceptance results in run order: (number, title, outcome, detail)
_ACCEPTANCE: list[tuple[str, str, str, str]] = []


def criterion(number: str, title: str):
    """Tag an acceptance test so its outcome is summarised at the end of the run."""
    def wrap(fn):
        fn.criterion = (number, title)
        return fn
    return wrap


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    tag = getattr(getattr(item, "function", None), "criterion", None)
    if tag is None:
        return
    failed_early = rep.when == "setup" and not rep.passed
    if rep.when == "call" or failed_early:
        detail = dict(item.user_properties).get("detail", "")
        if not rep.passed and not detail:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
        _ACCEPTANCE.append((tag[0], tag[1], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0])):
        terminalreporter.write_line(f"criterion {number} ({title}): {outcome}  {detail}")
