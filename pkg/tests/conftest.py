import pytest

# acceptance verdicts, collected for the end-of-session summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str) -> None:
        # a criterion checked by several test cases passes only if all of them do
        if number in ACCEPTANCE:
            prev_ok, prev_detail = ACCEPTANCE[number]
            ok, detail = prev_ok and ok, f"{prev_detail}; {detail}"
        ACCEPTANCE[number] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
