import pytest

_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line, print it straight to the terminal, then assert."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number, title, ok, detail, skip=False):
        status = "SKIP" if skip else ("PASS" if ok else "FAIL")
        line = f"[criterion {number:2d}] {status} {title}: {detail}"
        _RESULTS[number] = line
        with capman.global_and_fixture_disabled():
            print("\n" + line)
        if skip:
            pytest.skip(detail)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[number])
