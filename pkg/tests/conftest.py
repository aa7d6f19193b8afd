import numpy as np
import pytest

from affuse import tensor as K


@pytest.fixture(autouse=True)
def f64():
    """Every test starts in double precision and leaves the global mode as it found it."""
    prev = K.get_precision()
    K.set_precision("f64")
    yield
    K.set_precision(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""
    def report(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} [{number}] {title}" + (f" -- {detail}" if detail else "")
        request.config.stash.setdefault(VERDICTS, []).append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
