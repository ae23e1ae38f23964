import pytest

from fsar.config import GenerationConfig
from fsar.data import Dataset, generate_dataset

TINY = GenerationConfig(n_train_classes=5, n_test_classes=5, samples_per_class=10, t_raw=8,
                        max_way=5, max_shot=5, max_query=5)


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    return Dataset(generate_dataset(TINY, 11, tmp_path_factory.mktemp("tiny")))
