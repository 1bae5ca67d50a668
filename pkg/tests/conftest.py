import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctt.model import LayerSpec, Model, ModelSpec

settings.register_profile("ctt", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ctt")

ROOT = Path(__file__).resolve().parents[1]


def mnist_dir():
    """IDX directory for the data-backed tests, or None when absent."""
    candidates = []
    if os.environ.get("CTT_DATA_DIR"):
        root = Path(os.environ["CTT_DATA_DIR"])
        candidates += [root / "mnist", root]
    candidates.append(Path("/root/data/mnist"))
    for c in candidates:
        if (c / "train-images-idx3-ubyte").exists():
            return c
    return None


def small_cnn(seed=0, dtype=np.float64, input_shape=(1, 6, 6)):
    """conv 3x3 -> relu -> maxpool -> fc -> relu -> fc, for fast exact checks."""
    c, h, w = input_shape
    spec = ModelSpec("small", (
        LayerSpec("conv", c, 3, 3, 1, 1),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("fc", 3 * (h // 2) * (w // 2), 5),
        LayerSpec("relu"),
        LayerSpec("fc", 5, 3),
    ), input_shape)
    return Model(spec, seed=seed, dtype=dtype)


def random_network(rng, dtype=np.float64):
    """A random small conv/fc stack with every layer kind represented."""
    c = int(rng.integers(1, 3))
    h = w = int(rng.choice([4, 6, 8]))
    k = int(rng.choice([1, 3]))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    cout = int(rng.integers(1, 4))
    layers = [LayerSpec("conv", c, cout, k, 1, pad), LayerSpec("relu")]
    ho = h + 2 * pad - k + 1
    if ho % 2 == 0 and rng.random() < 0.7:
        layers.append(LayerSpec("maxpool"))
        ho //= 2
    hidden = int(rng.integers(2, 7))
    layers += [LayerSpec("fc", cout * ho * ho, hidden), LayerSpec("relu"),
               LayerSpec("fc", hidden, int(rng.integers(2, 4)))]
    spec = ModelSpec("random", tuple(layers), (c, h, w))
    model = Model(spec, seed=int(rng.integers(1 << 30)), dtype=dtype)
    for name in model.params:
        if name.endswith("bias"):
            model.params[name] = rng.normal(0, 0.3, model.params[name].shape).astype(dtype)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_path():
    path = mnist_dir()
    if path is None:
        pytest.skip("MNIST IDX files not available (set CTT_DATA_DIR)")
    return path


CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and asserts it."""

    def record(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
