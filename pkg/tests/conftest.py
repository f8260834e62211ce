import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from models.config_model import DataConfig, NetworkConfig, RunConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_network_config():
    """Depth-1 network with a few hundred parameters."""
    return NetworkConfig(depth=1, channels=2, num_classes=4)


@pytest.fixture
def tiny_run_config(tmp_path):
    return RunConfig(
        seed=3,
        out_dir=tmp_path / "run",
        network={"depth": 1, "channels": 2, "num_classes": 4},
        meta={"iterations": 2, "batch_size": 1, "prefetch": False, "log_every": 1,
              "checkpoint_every": 1, "validate_every": 1},
        data={"extents": (16, 16), "samples_per_domain": 3, "support_size": 5, "test_count": 2},
        lab={"horizons": [100, 200, 400], "repeats": 4},
    )


@pytest.fixture
def small_data_config():
    return DataConfig(extents=(16, 16), samples_per_domain=3, support_size=5, test_count=2)
