from enum import auto

from strenum import StrEnum


class ALGORITHM(StrEnum):
    """The federated training algorithms which can be run."""

    pfedbayes = auto()
    fedavg = auto()


class DATASET_NAME(StrEnum):
    """The datasets an experiment can be run on."""

    mnist = auto()
    blobs = auto()
    synth_regression = auto()


class DATASET_KIND(StrEnum):
    classification = auto()
    regression = auto()


class LIKELIHOOD(StrEnum):
    """The observation model at the network output."""

    categorical = auto()
    """Softmax over raw logits, targets are class indices."""

    gaussian = auto()
    """Gaussian noise with a fixed standard deviation around the raw network output."""


class ACTIVATION(StrEnum):
    relu = auto()


class SPLIT_TIER(StrEnum):
    """The dataset size tiers, per client and per assigned label."""

    small = auto()
    medium = auto()
    large = auto()


class AGGREGATION(StrEnum):
    """How the server combines the uploaded localized global models."""

    algorithm1 = auto()
    """The beta-damped average of the sampled uploads."""

    optimal = auto()
    """The closed-form minimizer of the average KL divergence to the sampled uploads."""


class KL_STEP(StrEnum):
    """How a local step moves the means under the KL pull between the personalized and global models."""

    proximal = auto()
    """The exact proximal step of the quadratic mean term; the likelihood and sigma parts take a gradient step."""

    gradient = auto()
    """A plain gradient step on the whole objective. Diverges once eta * zeta / sigma_w^2 exceeds 2."""


class RNG_PURPOSE(StrEnum):
    """The labels which key every random stream. Changing these changes every seeded result."""

    init = auto()
    client = auto()
    subset = auto()
    evaluate = auto()
    data = auto()
    partition = auto()


SPLIT_TIER_SIZES: dict[SPLIT_TIER, tuple[int, int]] = {
    SPLIT_TIER.small: (50, 950),
    SPLIT_TIER.medium: (200, 800),
    SPLIT_TIER.large: (900, 300),
}
"""(train, test) samples per client for each of its labels, for every tier."""

DATASET_KIND_LOOKUP: dict[DATASET_NAME, DATASET_KIND] = {
    DATASET_NAME.mnist: DATASET_KIND.classification,
    DATASET_NAME.blobs: DATASET_KIND.classification,
    DATASET_NAME.synth_regression: DATASET_KIND.regression,
}

DEFAULT_ZETA = 10.0
DEFAULT_RHO_INIT = -2.5
DEFAULT_ETA = 0.001
DEFAULT_FEDAVG_LR = 0.01
DEFAULT_SUBSET_SIZE = 10
DEFAULT_BATCH_SIZE = 50
DEFAULT_HIDDEN_WIDTH = 100
DEFAULT_REGRESSION_HIDDEN_WIDTH = 8
DEFAULT_SIGMA_EPS = 0.5

MNIST_NUM_CLASSES = 10


def get_split_sizes(tier: SPLIT_TIER) -> tuple[int, int]:
    """
    Get the per-label sample counts of a dataset size tier.

    Args:
        tier: The dataset size tier.

    Returns:
        The number of train and test samples each client receives for each of its labels.
    """
    return SPLIT_TIER_SIZES[tier]
