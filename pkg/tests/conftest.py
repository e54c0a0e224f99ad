import contextlib
import time

import pytest

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion as PASS or FAIL with a short detail line."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        info = {}
        start = time.perf_counter()
        try:
            yield info
        except BaseException as exc:
            _ACCEPTANCE[number] = ("FAIL", title, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            raise
        else:
            detail = info.get("detail", "")
            _ACCEPTANCE[number] = ("PASS", title, f"{detail} [{time.perf_counter() - start:.1f}s]".strip())

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} {number:>2}. {title}: {detail}")
