import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def artifacts_dir(tmp_path_factory):
    """Where acceptance runs drop their CSV records."""
    import os
    from pathlib import Path

    d = Path(os.environ.get("OCPW_ARTIFACTS", Path(__file__).parent.parent / "artifacts"))
    d.mkdir(parents=True, exist_ok=True)
    return d


@pytest.fixture(scope="session")
def smooth_fields():
    """Twenty 128^3 synthetic fields with varied smoothness (shared, read-only)."""
    from ocpw.datagen import FieldSpec, gen_smooth_field

    return [
        gen_smooth_field(FieldSpec(f"s{seed}", (128, 128, 128), decay=2.0 + (seed % 4) * 0.5, seed=seed))
        for seed in range(20)
    ]
