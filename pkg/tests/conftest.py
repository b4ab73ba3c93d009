import pytest

# acceptance verdicts, keyed by criterion number; printed at the end of the run
_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture()
def acceptance(request):
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(k: int, ok: bool, msg: str) -> None:
        store[k] = (bool(ok), msg)

    return record


def pytest_terminal_summary(terminalreporter):
    verdicts = terminalreporter.config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(verdicts):
        ok, msg = verdicts[k]
        first, *rest = msg.splitlines()
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {first}")
        for line in rest:
            terminalreporter.write_line(f"    {line}")
