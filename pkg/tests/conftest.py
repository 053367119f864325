import time

SUITE_BUDGET_S = 300.0

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict = {}
_START = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_sessionstart(session):
    _START["t"] = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - _START.get("t", time.perf_counter())
    session.config._suite_elapsed = elapsed
    if 10 in ACCEPTANCE:
        ok, detail = ACCEPTANCE[10]
        within = elapsed < SUITE_BUDGET_S
        ACCEPTANCE[10] = (ok and within, f"{detail}; suite {elapsed:.0f} s (budget {SUITE_BUDGET_S:.0f} s)")
        if not within:
            session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
