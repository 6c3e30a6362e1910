import numpy as np
import pytest
from hypothesis import settings

# fixed example generation keeps the suite reproducible run to run
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# verdict lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    def emit(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
