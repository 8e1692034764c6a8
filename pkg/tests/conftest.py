import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> list of (label, passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[k]
        verdict = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        detail = "; ".join(f"{label}: {d}" + ("" if ok else " [failed]") for label, ok, d in checks)
        terminalreporter.write_line(f"criterion {k}: {verdict} | {detail}")
