import os
import sys
from pathlib import Path

import numpy as np
import pytest
from loguru import logger

from pfedbayes.bnn import NetworkArch
from pfedbayes.data import Dataset, gen_blobs, gen_synth_regression, write_idx
from pfedbayes.meta_consts import LIKELIHOOD

os.environ["TESTS_ONGOING"] = "1"

RUN_BENCHMARKS = bool(os.environ.get("PFEDBAYES_RUN_BENCHMARKS"))


@pytest.fixture(scope="session")
def env_var_checks() -> None:
    """Check for required environment variables."""

    assert "TESTS_ONGOING" in os.environ, "Environment variable 'TESTS_ONGOING' not set."


@pytest.fixture(scope="session")
def base_path_for_tests() -> Path:
    target_path = Path(__file__).parent.joinpath("test_data_results/pfedbayes")
    target_path.mkdir(parents=True, exist_ok=True)
    return target_path


@pytest.fixture(scope="session", autouse=True)
def setup_logging(base_path_for_tests: Path):
    """Set up logging for tests."""
    logger.remove()
    logger.configure(
        handlers=[
            {
                "sink": base_path_for_tests.joinpath("test_log.txt"),
                "format": "{time:YYYY-MM-DD HH:mm:ss} | {level} | {message}",
            },
            {"sink": sys.stderr, "format": "{time:YYYY-MM-DD HH:mm:ss} | {level} | {message}", "level": "WARNING"},
        ],
    )


@pytest.fixture(scope="session")
def tiny_arch() -> NetworkArch:
    """The [2, 3, 2] classifier used for gradient checks."""
    return NetworkArch(layer_widths=[2, 3, 2], likelihood=LIKELIHOOD.categorical)


@pytest.fixture(scope="session")
def tiny_regression_arch() -> NetworkArch:
    return NetworkArch(layer_widths=[2, 3, 1], likelihood=LIKELIHOOD.gaussian, sigma_eps=0.5)


@pytest.fixture(scope="session")
def small_blobs() -> Dataset:
    """4 well separated classes in 3 dimensions, 60 samples each."""
    return gen_blobs(classes=4, per_class=60, input_dim=3, spread=0.3, seed=7)


@pytest.fixture(scope="session")
def small_regression() -> Dataset:
    return gen_synth_regression(n=120, input_dim=2, sigma_eps=0.1, seed=3)


@pytest.fixture(scope="session")
def idx_fixture_folder(base_path_for_tests: Path) -> Path:
    """Two 2x2 images, [[0, 255], [128, 64]] and [[255, 0], [0, 255]], labelled 3 and 7."""
    folder = base_path_for_tests.joinpath("idx_fixture")
    folder.mkdir(exist_ok=True)
    images = np.array([[[0, 255], [128, 64]], [[255, 0], [0, 255]]], dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    write_idx(images, labels, folder.joinpath("images-idx3-ubyte"), folder.joinpath("labels-idx1-ubyte"))
    write_idx(
        images,
        labels,
        folder.joinpath("images-idx3-ubyte.gz"),
        folder.joinpath("labels-idx1-ubyte.gz"),
        compress=True,
    )
    return folder


def pytest_collection_modifyitems(items):  # type: ignore
    """Skips the benchmark checks unless PFEDBAYES_RUN_BENCHMARKS is set, and orders the test modules so the
    building blocks are checked before the end-to-end runs."""
    skip_benchmark = pytest.mark.skip(reason="set PFEDBAYES_RUN_BENCHMARKS to run the benchmark checks")
    for item in items:
        if "benchmark" in item.keywords and not RUN_BENCHMARKS:
            item.add_marker(skip_benchmark)

    MODULES_TO_RUN_FIRST = ["tests.test_tensor", "tests.test_bnn"]

    MODULES_TO_RUN_LAST = ["tests.test_experiment"]
    module_mapping = {item: item.module.__name__ for item in items}

    sorted_items = []

    for module in MODULES_TO_RUN_FIRST:
        sorted_items.extend([item for item in items if module_mapping[item] == module])

    sorted_items.extend(
        [item for item in items if module_mapping[item] not in MODULES_TO_RUN_FIRST + MODULES_TO_RUN_LAST],
    )

    for module in MODULES_TO_RUN_LAST:
        sorted_items.extend([item for item in items if module_mapping[item] == module])

    items[:] = sorted_items
