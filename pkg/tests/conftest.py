import pytest

# (number, title, passed, detail) rows filled in by tests/test_acceptance.py
ACCEPTANCE = []


@pytest.fixture
def acceptance_report():
    def report(num, title, ok, detail):
        ACCEPTANCE.append((num, title, bool(ok), detail))
        print(f"ACCEPTANCE {num} {'PASS' if ok else 'FAIL'}: {title} | {detail}")

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{num}. {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
