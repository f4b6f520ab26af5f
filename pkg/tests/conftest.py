import numpy as np
import pytest
import torch

from ajepa.data import SyntheticSpec, gen_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tone_dataset(tmp_path_factory):
    """Small 4-class synthetic set shared by unit tests."""
    root = tmp_path_factory.mktemp("tones")
    paths = gen_synthetic(
        SyntheticSpec(n_classes=4, clips_per_class=10, duration_s=1.5, seed=0), root
    )
    return root, paths


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
