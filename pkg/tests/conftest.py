import numpy as np
import pytest

from emodist.labels import N_CLASSES, SoftLabel
from emodist.model import HeadParams, ModelConfig


def make_soft(*pairs: tuple[int, float], n_annotations: int = 5) -> SoftLabel:
    """Soft label with the given (class_index, prob) entries."""
    probs = np.zeros(N_CLASSES)
    for idx, p in pairs:
        probs[idx] = p
    return SoftLabel(probs=probs, n_annotations=n_annotations)


def random_simplex(rng: np.random.Generator, n: int = N_CLASSES) -> np.ndarray:
    v = rng.random(n) + 1e-9
    return v / v.sum()


def random_params(config: ModelConfig, rng: np.random.Generator,
                  scale: float = 0.5) -> HeadParams:
    """Fully random parameters (nonzero biases), for gradient checks."""
    params = HeadParams.initialize(config, rng, output_scale=scale)
    for tensor in params.named().values():
        tensor[...] = rng.standard_normal(tensor.shape) * scale
    return params


def assert_kink_free(output, margin: float) -> None:
    """Guard finite differences against ReLU kinks within the step size."""
    slabs = list(output.cache["conv_pre"]) + [output.cache["mlp_pre"]]
    for slab in slabs:
        assert np.abs(slab).min() > margin, "fixture too close to a ReLU kink; pick another seed"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240517)
