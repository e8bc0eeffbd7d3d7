import pytest

ACCEPTANCE_LINES = pytest.StashKey[list]()


class Criterion:
    """Collects the checks of one acceptance criterion and records a single pass/fail line."""

    def __init__(self, lines: list, num: int, title: str):
        self.lines = lines
        self.num = num
        self.title = title
        self.failures: list[str] = []
        self.details: list[str] = []

    def check(self, ok: bool, what: str) -> bool:
        if not ok:
            self.failures.append(what)
        return ok

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.failures.append(f"{exc_type.__name__}: {exc}")
        status = "FAIL" if self.failures else "PASS"
        info = "; ".join(self.failures or self.details)
        line = f"criterion {self.num} [{status}] {self.title}" + (f" -- {info}" if info else "")
        self.lines.append(line)
        print(line)
        if exc is None and self.failures:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])
    return lambda num, title: Criterion(lines, num, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
