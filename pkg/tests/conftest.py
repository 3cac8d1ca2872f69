import os

import numpy as np
import pytest
import torch

from molingo_lab.synthetic import SynthSpec, synth_corpus

torch.set_num_threads(max(1, int(os.environ.get("MOLINGO_LAB_THREADS", "2"))))


@pytest.fixture(scope="session")
def toy_corpus():
    return synth_corpus(SynthSpec(length_range=(24, 48)), 64, seed=11)


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(0))
