import pytest

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdicts() -> list[str]:
    """Acceptance tests append one pass/fail line per criterion here."""
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
