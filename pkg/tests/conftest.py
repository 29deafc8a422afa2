"""Shared fixtures: a real MNIST subset as IDX files, and the acceptance report."""

import numpy as np
import pytest
from mlxtend.data import mnist_data

from evfl.streams import write_idx_images, write_idx_labels

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """The 5,000-image MNIST subset bundled with mlxtend, written out as IDX files."""
    X, y = mnist_data()
    root = tmp_path_factory.mktemp("mnist")
    images = root / "images-idx3-ubyte"
    labels = root / "labels-idx1-ubyte"
    write_idx_images(images, X.astype(np.uint8).reshape(-1, 28, 28))
    write_idx_labels(labels, y.astype(np.uint8))
    return images, labels


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def _record(criterion, passed, detail):
        line = f"{criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
