import numpy as np
import pytest
from hypothesis import settings

from jointquad import synth
from jointquad.surface import backproject, estimate_normals

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def surfaces_of(seq):
    return [estimate_normals(backproject(f, k)) for k, f in enumerate(seq.frames)]


@pytest.fixture(scope="session")
def rail_noiseless():
    seq = synth.make_sequence("synth1", 3)
    return seq, surfaces_of(seq)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
