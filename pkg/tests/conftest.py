import os
from pathlib import Path

import pytest

from fedskew.datasets import find_mnist, synth_tabular

ROOT = Path(__file__).resolve().parent.parent


def mnist_dir() -> Path | None:
    for candidate in (os.environ.get("MNIST_DIR"), ROOT / "data" / "mnist"):
        if candidate and (Path(candidate) / "train-labels-idx1-ubyte").exists():
            return Path(candidate)
    return None


@pytest.fixture(scope="session")
def mnist():
    directory = mnist_dir()
    if directory is None:
        pytest.skip("MNIST IDX files not found; set MNIST_DIR")
    return find_mnist(directory)


@pytest.fixture(scope="session")
def mnist_train(mnist):
    return mnist[0]


@pytest.fixture(scope="session")
def synth7():
    return synth_tabular(7, 2100, 16, seed=0)


_ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line; the lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_LINES, [])

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
