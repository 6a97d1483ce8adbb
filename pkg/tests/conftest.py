import numpy as np
import pytest
from hypothesis import settings

from birf.field import FieldModel
from birf.grid import GridConfig, GridLevelConfig

settings.register_profile("birf", deadline=None, max_examples=60)
settings.load_profile("birf")


def tiny_grid_config(feature_dim: int = 1) -> GridConfig:
    """Two 3D levels (N=2, 4; the second hashed into 64 slots) and one 2D level."""
    return GridConfig(
        (GridLevelConfig(3, 2, 64, feature_dim), GridLevelConfig(3, 4, 64, feature_dim)),
        (GridLevelConfig(2, 3, 16, feature_dim),),
        feature_dim,
    )


def tiny_model(seed: int = 0, latent_range=(0.1, 0.9), dtype=np.float64) -> FieldModel:
    """16-wide float64 model with sign-stable latents of random sign."""
    rng = np.random.default_rng(seed)
    model = FieldModel.create(tiny_grid_config(), rng, hidden_width=16, dtype=dtype)
    for t in model.grid_params():
        mag = rng.uniform(*latent_range, t.shape)
        t.latent[...] = mag * rng.choice([-1.0, 1.0], t.shape)
    # larger MLP weights so gradients are well away from zero
    for p in model.mlp_params():
        p.values[...] = rng.normal(0, 0.5, p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
