import logging
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pytest
import yaml
from scipy.stats import ortho_group

from models.data_classes import DatasetSpec, OrthoPolicy, TrainConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture
def make_spd() -> Callable[..., np.ndarray]:
    """SPD matrix with a prescribed condition number and random eigenvectors."""
    def factory(rng: np.random.Generator, d: int, kappa: float = 10.0) -> np.ndarray:
        Q = ortho_group.rvs(d, random_state=rng) if d > 1 else np.eye(1)
        lambdas = np.geomspace(kappa, 1.0, d)
        P = (Q * lambdas) @ Q.T
        return 0.5 * (P + P.T)
    return factory


@pytest.fixture
def small_config() -> TrainConfig:
    """A run small enough for the default test selection."""
    return TrainConfig(
        d=4,
        batch_size=16,
        epochs=2,
        lr=0.05,
        momentum=0.9,
        weight_decay=5e-4,
        seed=0,
        policy=OrthoPolicy(),
        dataset=DatasetSpec(classes=3, input_dim=4, samples_per_class=40, spread=0.5),
        trace_interval=4,
        final_epochs=2,
    )


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[[dict[str, Any]], Path]:
    def writer(values: dict[str, Any], name: str = "config.yaml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(values, sort_keys=False))
        return path
    return writer


@pytest.fixture
def restore_logging():
    """main() reconfigures the root logger; put it back afterwards."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    for handler in root.handlers[:]:
        if handler not in handlers:
            root.removeHandler(handler)
            handler.close()
    for handler in handlers:
        if handler not in root.handlers:
            root.addHandler(handler)
    root.setLevel(level)
