import os

os.environ.setdefault("APFB_SEED", "0")

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
        terminalreporter.write_line(line)
