import numpy as np
import pytest

import recourselab as rl


@pytest.fixture(scope="session")
def synth_small():
    return rl.make_synthetic(60, seed=3)


@pytest.fixture(scope="session")
def baseline_small(synth_small):
    # compact net, extra steps: a well-converged classifier for search tests
    return rl.train_baseline(synth_small, steps=150, seed=1, hidden=(16, 16)).model


def negative_test_rows(dataset, model):
    rows = [i for i in dataset.test_idx if model.forward(dataset.features[i]) <= 0.5]
    return np.array(rows)
