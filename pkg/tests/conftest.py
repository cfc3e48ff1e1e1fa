import os

# must happen before numpy loads so BLAS sees it
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

import flowdistill as fd


@pytest.fixture(scope="session")
def two_point_data():
    return fd.ToyDataset(np.array([-3.0, 3.0]))


@pytest.fixture(scope="session")
def quick_teacher(two_point_data):
    """A lightly trained teacher: good enough for structural tests that
    need a non-degenerate velocity field, cheap enough for every run."""
    teacher, _ = fd.train_teacher(
        two_point_data, iterations=400, batch_size=256, lr=1e-3, seed=11, H=24, R=2
    )
    return teacher


@pytest.fixture(scope="session")
def quick_store(quick_teacher):
    return fd.generate_store(quick_teacher, 64, fd.TimeGrid.uniform(10), seed=5)
