import logging

import numpy as np
import pytest
import torch

from harnest.datapipe import synth_subjects


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_dataset():
    return synth_subjects(n_subjects=4, n_activities=3, n_channels=3, window=16,
                          windows_per_subject_per_class=4, seed=0)


@pytest.fixture
def quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
    return caplog
