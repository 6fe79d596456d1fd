import pytest

from wsdefseg.config import RunConfig, SgdConfig, StagePlan, SynthConfig
from wsdefseg.gradcheck import TINY_IMAGE, tiny_model_config
from wsdefseg.wpolyp import synthesize_dataset


def tiny_run_config(epochs: int = 2, use_dten: bool = True, **plan) -> RunConfig:
    return RunConfig(
        model=tiny_model_config(use_dten),
        sgd=SgdConfig(batch_size=2, learning_rate=0.05),
        plan=StagePlan(epochs=epochs, input_size=TINY_IMAGE, **plan),
        progress=False,
    )


@pytest.fixture
def run_config() -> RunConfig:
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six 32x32 train images (half scribbled) and three test images."""
    out = tmp_path_factory.mktemp("tiny_data")
    config = SynthConfig(n_train=6, n_test=3, size=TINY_IMAGE[0], labeled_fraction=0.5, seed=5)
    return synthesize_dataset(config, out)
