import pytest

_RESULTS = {}


class CriterionLog:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def record(self, number, title, passed, detail=""):
        _RESULTS[number] = (title, passed, detail)


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, detail = _RESULTS[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}  {detail}".rstrip())
