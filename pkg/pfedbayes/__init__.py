from dotenv import load_dotenv

load_dotenv()


from .meta_consts import (  # noqa: E402
    AGGREGATION,
    ALGORITHM,
    DATASET_KIND,
    DATASET_NAME,
    KL_STEP,
    LIKELIHOOD,
    RNG_PURPOSE,
    SPLIT_TIER,
    SPLIT_TIER_SIZES,
)
from .path_consts import (  # noqa: E402
    BASE_PATH,
    LOG_FOLDER,
    MNIST_FOLDER,
    RUNS_FOLDER,
    get_run_output_paths,
)

__all__ = [
    "AGGREGATION",
    "ALGORITHM",
    "DATASET_KIND",
    "DATASET_NAME",
    "KL_STEP",
    "LIKELIHOOD",
    "RNG_PURPOSE",
    "SPLIT_TIER",
    "SPLIT_TIER_SIZES",
    "BASE_PATH",
    "LOG_FOLDER",
    "MNIST_FOLDER",
    "RUNS_FOLDER",
    "get_run_output_paths",
]
