import pytest

from vineseg.synth import generate_dataset


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Six high-contrast 64×64 leaves."""
    root = tmp_path_factory.mktemp("tiny")
    return generate_dataset(root, 6, 64, 64, "high", seed=3)


@pytest.fixture(scope="session")
def two_tone_data(tmp_path_factory):
    """Leaves whose veins share the blade colour."""
    root = tmp_path_factory.mktemp("twotone")
    return generate_dataset(root, 8, 64, 64, "none", seed=4)
