import contextlib
import time

import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """``with criterion(3, "beta trend") as info:`` records one PASS/FAIL line."""
    results = request.config.stash[_RESULTS]

    @contextlib.contextmanager
    def run(number, title):
        info = {}
        start = time.perf_counter()
        try:
            yield info
        except BaseException as exc:
            results.append((number, title, False, f"{type(exc).__name__}: {exc}".splitlines()[0], info))
            raise
        finally:
            info.setdefault("seconds", round(time.perf_counter() - start, 1))
        results.append((number, title, True, "", info))

    return run


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, err, info in sorted(results, key=lambda r: r[0]):
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        terminalreporter.write_line(line + (f" -- {err}" if err else ""))
