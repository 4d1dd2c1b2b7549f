"""Shared pytest hooks.

Acceptance tests record one verdict per criterion in ``ACCEPTANCE``; the
terminal summary prints them in order so the outcome of every criterion is
visible in one place, whatever the capture settings.
"""

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
