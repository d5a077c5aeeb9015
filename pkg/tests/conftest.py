import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slowfit.levy import StableNoiseSpec
from slowfit.models import example_model

settings.register_profile(
    "default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def model():
    return example_model()


@pytest.fixture(scope="session")
def noise():
    return StableNoiseSpec(1.8, 0.05, 1)


@pytest.fixture(scope="session")
def x_start():
    # fast variable on the noise-free manifold at y0 = 0.2
    return np.array([0.25 * np.cos(0.2)])


EPS_LADDER = (0.04, 0.02, 0.01)
TRACKING_SEEDS = tuple(range(20))


@pytest.fixture(scope="session")
def example_tracking():
    """Time-averaged |y_full - y_reduced| for the worked-example config, per eps and seed."""
    from pathlib import Path

    from slowfit.config import load_config
    from slowfit.estimator import tracking_error
    from slowfit.levy import SeededStream

    path = Path(__file__).resolve().parents[1] / "configs" / "example.toml"
    out = {}
    for eps in EPS_LADDER:
        cfg = load_config(path, {("dynamics", "eps"): eps})
        x0, y0 = cfg.initial_state()
        errs, _, _ = tracking_error(
            cfg.model(), cfg["dynamics"]["lambda0"], x0, y0, cfg.integrator(), cfg.noise(),
            [SeededStream(s, 0) for s in TRACKING_SEEDS], quad=cfg.quad(),
        )
        out[eps] = errs
    return out
