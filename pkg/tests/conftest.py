import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

torch.set_num_threads(1)

_ACCEPTANCE: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record():
    """Log one acceptance line; the test still asserts on its own."""

    def _record(criterion: str, ok: bool | None, detail: str) -> None:
        status = "REPORT" if ok is None else ("PASS" if ok else "FAIL")
        line = f"[{status}] {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
