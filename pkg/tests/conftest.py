import os
from pathlib import Path

import numpy as np
import pytest

MNIST_DIR = Path(os.environ.get("HOYERSPARSE_MNIST", "/root/data/mnist"))


def central_difference(f, x, idx, h=1e-6):
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mnist_available() -> bool:
    return all((MNIST_DIR / name).exists() or (MNIST_DIR / (name + ".gz")).exists()
               for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                            "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))


@pytest.fixture(scope="session")
def mnist():
    if not mnist_available():
        pytest.skip(f"MNIST not found in {MNIST_DIR} (set HOYERSPARSE_MNIST)")
    from hoyersparse.data import load_mnist

    return load_mnist(MNIST_DIR)


@pytest.fixture(scope="session")
def lenet300_pretrained(mnist, tmp_path_factory):
    """30 epochs of plain Adam training on MNIST, shared by the slow tests.

    Returns ``(checkpoint_path, log)``; the log's first ten records are what
    a 10-epoch run with the same seed produces (batch order is drawn epoch
    by epoch from one generator).
    """
    from hoyersparse import optim
    from hoyersparse.model import build_network, save_checkpoint

    train, test = mnist
    net = build_network("lenet300100", seed=0)
    log = optim.train_epochs(net, train, optim.ObjectiveSpec(), optim.Adam(lr=1e-3), 30,
                             seed=0, test=test, batch_size=64)
    path = tmp_path_factory.mktemp("pretrain") / "pretrain.json"
    save_checkpoint(net, path, epoch=30, accuracy={"pretrain": log[-1]["test_acc"]})
    return path, log


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
