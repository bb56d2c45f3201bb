import pytest
import torch

from uapkit import SearchSpace, ShapesSpec, ToyTrainConfig, train_toy_encoder
from uapkit.data import DatasetManifest, render_shapes_dataset


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("tiny_data")


@pytest.fixture(scope="session")
def tiny_manifest_path(tiny_data_dir):
    return render_shapes_dataset(
        tiny_data_dir / "cls", ShapesSpec(images_per_class=12, seed=5, noise=0.08)
    )


@pytest.fixture(scope="session")
def tiny_manifest(tiny_manifest_path):
    return DatasetManifest.load(tiny_manifest_path)


@pytest.fixture(scope="session")
def tiny_captioned(tiny_data_dir):
    path = render_shapes_dataset(
        tiny_data_dir / "cap",
        ShapesSpec(images_per_class=6, seed=6, noise=0.08),
        kind="captioned",
    )
    return DatasetManifest.load(path)


def _train_tiny(seed, handle_id):
    config = ToyTrainConfig(
        dataset=ShapesSpec(images_per_class=40, seed=seed, noise=0.08),
        epochs=3,
        width=12,
        embed_dim=16,
    )
    return train_toy_encoder(config, seed=seed, handle_id=handle_id)


@pytest.fixture(scope="session")
def tiny_handle():
    return _train_tiny(0, "tiny0")


@pytest.fixture(scope="session")
def tiny_handle_b():
    return _train_tiny(1, "tiny1")


@pytest.fixture(scope="session")
def tiny_space(tiny_handle, tiny_handle_b):
    return SearchSpace(name="tiny_pair", handles=(tiny_handle, tiny_handle_b))


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    # unit tests draw torch randoms; pin so failures replay
    torch.manual_seed(1234)
