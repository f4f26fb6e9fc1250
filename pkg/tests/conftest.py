import contextlib

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


class _Criterion:
    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.checks = []

    def check(self, ok, detail):
        self.checks.append((bool(ok), detail))


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line for an acceptance criterion.

    Every ``check`` inside the block is evaluated; the block fails if any
    check fails or an exception escapes.
    """
    lines = request.config.stash[_LINES]

    @contextlib.contextmanager
    def run(number, title):
        c = _Criterion(number, title)
        error = None
        try:
            yield c
        except Exception as exc:  # reported, then re-raised
            error = exc
            raise
        finally:
            ok = error is None and c.checks and all(ok for ok, _ in c.checks)
            details = "; ".join(f"{d} [{'ok' if good else 'FAILED'}]" for good, d in c.checks)
            if error is not None:
                details = (details + "; " if details else "") + f"error: {error!r}"
            line = f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'} | {details}"
            lines.append((number, line))
            print(line)
        failed = [d for good, d in c.checks if not good]
        assert not failed, f"criterion {number} failed: {failed}"

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda t: t[0]):
        terminalreporter.write_line(line)
