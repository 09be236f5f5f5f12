"""Collects acceptance verdicts and prints them after the run."""

ACCEPTANCE = {}


def record(key, title, passed, detail=""):
    ACCEPTANCE[key] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k), k)):
        title, ok, detail = ACCEPTANCE[key]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}. {title}" + (f" -- {detail}" if detail else ""))
