import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """
    Record the outcome of one acceptance criterion.

    Usage: ``with criterion(3, "hand fixture") as note: ...``; ``note`` takes
    a short detail string shown next to the verdict.
    """
    results = request.config.stash[_RESULTS]

    class _Check:
        def __init__(self, number, title):
            self.key = (number, title)
            self.detail = ""

        def __call__(self, detail):
            self.detail = detail

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            verdict = "FAIL" if exc_type else "PASS"
            detail = self.detail if not exc_type else f"{exc_type.__name__}: {exc}"
            results[self.key] = (verdict, detail.splitlines()[0] if detail else "")
            return False

    return _Check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (verdict, detail) in sorted(results.items()):
        line = f"[{verdict}] {number:>2}. {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
