import numpy as np
import pytest

from diffcurriculum.data import Dataset, DatasetSpec


def random_dataset(n, k=3, shape=(8, 8), seed=0, id_offset=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, *shape)).astype(np.float32)
    labels = np.arange(n) % k
    return Dataset.real(images, labels, np.arange(id_offset, id_offset + n))


@pytest.fixture
def tiny_spec():
    return DatasetSpec(num_classes=4, head_count=40, imbalance_ratio=10, test_per_class=5, seed=3)


TINY_CONFIG = {
    "task": "longtail",
    "seed": 0,
    "head_count": 60,
    "imbalance_ratio": 10,
    "test_per_class": 10,
    "corpus_per_class": 20,
    "diffusion_epochs": 2,
    "diffusion_width": 32,
    "filter_per_class": 20,
    "filter_epochs": 2,
    "calibration_per_class": 5,
    "pretrain_epochs": 2,
    "epochs": 5,
    "curriculum_epochs": 4,
    "seeds_per_image": 2,
    "validation_per_lambda": 2,
    "battery_seeds": 2,
}


@pytest.fixture
def tiny_config():
    return dict(TINY_CONFIG)


# One line per acceptance criterion, printed after the run.
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
