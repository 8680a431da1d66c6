import pytest

from arm_lab.data import load_dataset, synth_dataset


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Small balanced corpus shared by trainer and CLI tests."""
    root = tmp_path_factory.mktemp("corpus") / "balanced"
    synth_dataset(str(root), 7, 24, extent=32, seed=11)
    return str(root)


@pytest.fixture(scope="session")
def corpus_index(corpus_dir):
    return load_dataset(corpus_dir)
