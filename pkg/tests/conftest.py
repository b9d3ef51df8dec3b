import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def record_criterion(request):
    """Store (passed, detail) for an acceptance criterion; printed at the end of the run."""
    store = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        store[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_RESULTS, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in store:
            ok, detail = store[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  not recorded (test errored or was deselected)")
