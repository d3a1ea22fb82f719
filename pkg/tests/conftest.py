import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA = {}


def record(name, ok, detail=""):
    CRITERIA[name] = (bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in CRITERIA.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
