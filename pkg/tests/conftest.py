import time

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_ACCEPTANCE: dict[str, tuple[bool, str, float]] = {}


class AcceptanceRecorder:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def __init__(self, key: str):
        self.key = key
        self.start = time.perf_counter()

    def record(self, passed: bool, detail: str) -> None:
        elapsed = time.perf_counter() - self.start
        _ACCEPTANCE[self.key] = (bool(passed), detail, elapsed)
        print(f"{self.key}: {'PASS' if passed else 'FAIL'} ({elapsed:.1f}s) {detail}")


@pytest.fixture()
def criterion(request):
    key = request.node.get_closest_marker("criterion").args[0]
    return AcceptanceRecorder(key)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion recorded in the summary")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[1:].split()[0])):
        passed, detail, elapsed = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if passed else 'FAIL'} ({elapsed:.1f}s) {detail}")
