import pytest
from hypothesis import settings

settings.register_profile("repo", derandomize=True, deadline=None)
settings.load_profile("repo")

CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line, then assert."""

    def check(label: str, ok: bool, detail: str = "") -> None:
        CRITERIA.append(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip())
        print(CRITERIA[-1])
        assert ok, f"{label}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
