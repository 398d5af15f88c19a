import contextlib

import pytest

_RESULTS = pytest.StashKey[dict]()


class CriterionLog:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def __init__(self, store: dict):
        self._store = store

    @contextlib.contextmanager
    def criterion(self, number: int, title: str):
        details: list[str] = []
        try:
            yield details
        except BaseException as exc:
            self._store[number] = (False, title, f"{type(exc).__name__}: {str(exc).splitlines()[0][:160]}")
            raise
        self._store[number] = (True, title, "; ".join(details))


@pytest.fixture
def acceptance(request) -> CriterionLog:
    return CriterionLog(request.config.stash.setdefault(_RESULTS, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, detail = results[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
