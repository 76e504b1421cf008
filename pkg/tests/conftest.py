import pytest

from xvgs.datagen import RingSpec, SceneSpec, generate_synthetic, load_dataset


def small_spec(**kw):
    base = dict(image_size=32, aerial=RingSpec(0.9, 2.4, 8, 0.0),
                ground=RingSpec(1.45, 0.12, 8, 0.22))
    base.update(kw)
    return SceneSpec(**base)


@pytest.fixture(scope="session")
def small_dataset_root(tmp_path_factory):
    return generate_synthetic(small_spec(), tmp_path_factory.mktemp("ds"))


@pytest.fixture(scope="session")
def small_dataset(small_dataset_root):
    return load_dataset(small_dataset_root)
