import numpy as np
import pytest

from nicbench import codecs
from nicbench.images import load_images


@pytest.fixture(scope="session")
def train_set():
    return [im for _, im in load_images("synthetic:mixed,32,n=16,seed=11")]


@pytest.fixture(scope="session")
def toy_codec(train_set):
    """A briefly trained factorized codec; lossy, fast, deterministic."""
    spec = codecs.CodecSpec("factorized", lmbda=0.005, seed=3)
    return codecs.train(spec, train_set, epochs=6, batch=8, seed=3).variant


@pytest.fixture(scope="session")
def toy_hyper(train_set):
    spec = codecs.CodecSpec("hyperprior-lite", lmbda=0.005, seed=4)
    return codecs.train(spec, train_set, epochs=4, batch=8, seed=4).variant


@pytest.fixture
def small_image():
    from nicbench.images import synthetic_image
    return synthetic_image("blend", 16, np.random.default_rng(21))


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criteria(request):
    """Collects one (status, detail) line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_CRITERIA, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines, key=lambda k: (int(k.rstrip("abcdefgh")), k)):
        status, detail = lines[key]
        terminalreporter.write_line(f"criterion {key:<4} {status:<5} {detail}")
