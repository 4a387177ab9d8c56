import numpy as np
import pytest
import torch

from crossmodal.config import micro_config
from crossmodal.scenes import generate_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro():
    return micro_config()


@pytest.fixture(scope="session")
def micro_dataset(micro):
    return generate_dataset(micro, n_scenes=4, views_per_scene=6, seed=3)


def randomize_zero_layers(registry, seed=0, scale=0.3):
    """Give zero-initialized output layers random weights so gradients reach every block."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in list(registry.encoders.values()) + list(registry.denoisers.values()):
            layer = module.proj if hasattr(module, "proj") else module.out
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=g, dtype=layer.weight.dtype) * scale)
            layer.bias.copy_(torch.randn(layer.bias.shape, generator=g, dtype=layer.bias.dtype) * scale)


def pytest_terminal_summary(terminalreporter):
    lines = [value for rep in terminalreporter.getreports("passed") + terminalreporter.getreports("failed")
             for key, value in rep.user_properties if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
