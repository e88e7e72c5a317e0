import sys


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance lines, one per criterion, after the test report."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number].line())
    passed = sum(r.passed for r in results.values())
    terminalreporter.write_line(f"{passed}/{len(results)} criteria pass")
