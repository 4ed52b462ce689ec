"""Constants, especially those to do with paths and file names, for the pfedbayes package."""

import os
from pathlib import Path

from loguru import logger

PACKAGE_NAME = "pfedbayes"
"""The name of this package. Also used as the name of the base folder for all cached files."""

BASE_PATH: Path = Path.home() / ".cache" / PACKAGE_NAME
"""The base path for all cached files. Will be based in PFEDBAYES_HOME if set, otherwise will be in the
~/.cache folder"""

PFEDBAYES_HOME = os.getenv("PFEDBAYES_HOME")
"""An override for the base cache folder."""

if PFEDBAYES_HOME:
    BASE_PATH = Path(PFEDBAYES_HOME).resolve().joinpath(PACKAGE_NAME)

LOG_FOLDER: Path = BASE_PATH.joinpath("logs")

RUNS_FOLDER_NAME: str = "runs"
"""The default name of the experiment output folder. If you need the path, use `RUNS_FOLDER`."""

RUNS_FOLDER: Path = BASE_PATH.joinpath(RUNS_FOLDER_NAME)
"""The default folder experiment outputs are written to."""

MNIST_FOLDER: Path = BASE_PATH.joinpath("mnist")
"""The default folder searched for the MNIST IDX files."""

_mnist_dir = os.getenv("PFEDBAYES_MNIST_DIR")
if _mnist_dir:
    logger.info(f"Using MNIST folder: {_mnist_dir}")
    MNIST_FOLDER = Path(_mnist_dir)

MNIST_TRAIN_IMAGES_FILENAME = "train-images-idx3-ubyte"
MNIST_TRAIN_LABELS_FILENAME = "train-labels-idx1-ubyte"
MNIST_TEST_IMAGES_FILENAME = "t10k-images-idx3-ubyte"
MNIST_TEST_LABELS_FILENAME = "t10k-labels-idx1-ubyte"

ROUNDS_CSV_FILENAME = "rounds.csv"
SUMMARY_CSV_FILENAME = "summary.csv"
FINAL_STATE_FILENAME = "final_state.npz"
GENERATED_DATASET_FILENAME = "dataset.npz"
RUN_LOG_FILENAME = "run.log"


def make_all_pfedbayes_folders():
    """Make all the default pfedbayes folders."""
    if not BASE_PATH.exists():
        BASE_PATH.mkdir(parents=True, exist_ok=True)
        logger.info(f"Created base path: {BASE_PATH}")
    if not LOG_FOLDER.exists():
        LOG_FOLDER.mkdir(parents=True, exist_ok=True)
        logger.info(f"Created log folder: {LOG_FOLDER}")
    if not RUNS_FOLDER.exists():
        RUNS_FOLDER.mkdir(parents=True, exist_ok=True)
        logger.info(f"Created runs folder: {RUNS_FOLDER}")


if os.getenv("PFEDBAYES_MAKE_FOLDERS"):
    logger.info("Making all pfedbayes folders if they don't already exist.")
    logger.info(f"BASE_PATH: {BASE_PATH}")
    make_all_pfedbayes_folders()


def find_mnist_file(filename: str, *, base_path: str | Path = MNIST_FOLDER) -> Path | None:
    """Return the path to an MNIST IDX file, accepting a gzip-compressed copy as well.

    Args:
        filename (str): The uncompressed IDX filename, e.g. `train-images-idx3-ubyte`.
        base_path (str | Path): The folder to look in. Defaults to MNIST_FOLDER.

    Returns:
        Path | None: The path found, or None if neither the plain nor the `.gz` file exists.
    """
    base_path = Path(base_path)
    for candidate in (base_path.joinpath(filename), base_path.joinpath(filename + ".gz")):
        if candidate.exists():
            return candidate
    return None


def get_run_output_paths(output_dir: str | Path) -> dict[str, Path]:
    """Returns the paths of every file an experiment run writes.

    Args:
        output_dir (str | Path): The experiment output folder.

    Returns:
        dict[str, Path]: A lookup from file role (`rounds`, `summary`, `final_state`, `log`) to path.
    """
    output_dir = Path(output_dir)
    return {
        "rounds": output_dir.joinpath(ROUNDS_CSV_FILENAME),
        "summary": output_dir.joinpath(SUMMARY_CSV_FILENAME),
        "final_state": output_dir.joinpath(FINAL_STATE_FILENAME),
        "log": output_dir.joinpath(RUN_LOG_FILENAME),
    }
