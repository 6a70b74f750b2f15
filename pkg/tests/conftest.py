"""Prints the acceptance scoreboard after any run that touched the gate."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.CRITERIA):
        desc = mod.CRITERIA[num]
        entry = mod.RESULTS.get(num)
        if entry is None:
            terminalreporter.write_line(
                f"criterion {num:2d} ....  {desc}: did not complete", yellow=True)
            continue
        passed, detail = entry
        word = "PASS" if passed else "FAIL"
        line = f"criterion {num:2d} {word}  {desc}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line, green=passed, red=not passed)
