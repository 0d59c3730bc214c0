import numpy as np
import pytest
import torch

from sanerf import data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sphere_scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sphere")
    data.generate_scene(data.sphere_scene_spec(), out, seed=0)
    return out


@pytest.fixture(scope="session")
def standard_scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("standard")
    data.generate_scene(data.standard_scene_spec(), out, seed=0)
    return out


@pytest.fixture(scope="session")
def standard_dataset(standard_scene_dir):
    return data.load_scene(standard_scene_dir / "manifest.json")


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


TINY = {
    "steps": 4,
    "rays_per_step": 8,
    "features_per_triple": 4,
    "n_coarse": 8,
    "n_fine": 8,
    "field": {"depth": 2, "width": 16, "skips": [], "pos_encoding": {"n_freqs": 3}, "dir_encoding": {"n_freqs": 2}},
    "posenet": {"channels": [4, 4, 8, 8, 8, 8, 8], "image_size": [24, 32]},
}


@pytest.fixture
def tiny_config():
    from sanerf.trainer import TrainConfig

    def make(**kw):
        return TrainConfig.from_dict({**TINY, **kw})

    return make


@pytest.fixture(scope="session")
def sphere_dataset(sphere_scene_dir):
    return data.load_scene(sphere_scene_dir)


@pytest.fixture(scope="session")
def tiny_run(sphere_dataset, tmp_path_factory):
    """Phase A on all images of the sphere scene with a tiny model."""
    from sanerf import trainer

    out = tmp_path_factory.mktemp("tiny_run")
    trainer.train_scene(sphere_dataset, trainer.TrainConfig.from_dict(TINY), out, phase="all")
    return out
