"""Dataset generation, IDX (MNIST) ingestion and non-i.i.d. client partitioning."""

from __future__ import annotations

import gzip
from collections.abc import Callable
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pfedbayes.meta_consts import DATASET_KIND, RNG_PURPOSE, SPLIT_TIER, get_split_sizes
from pfedbayes.tensor import Matrix, stream_for

IDX_IMAGES_MAGIC = 0x00000803
"""unsigned byte data, 3 dimensions (count, rows, cols)."""
IDX_LABELS_MAGIC = 0x00000801
"""unsigned byte data, 1 dimension (count)."""
GZIP_MAGIC = b"\x1f\x8b"


class IdxFormatError(ValueError):
    """An IDX file could not be parsed."""


class IdxMagicError(IdxFormatError):
    """The file does not start with the expected magic number."""


class IdxTruncatedError(IdxFormatError):
    """The file ends before its header or its declared payload does."""


class IdxCountMismatchError(IdxFormatError):
    """The image and label files declare different item counts."""


class InsufficientSamplesError(ValueError):
    """A class does not hold enough samples for the requested partition."""

    def __init__(self, label: int, available: int, needed: int) -> None:
        self.label = label
        self.available = available
        self.needed = needed
        super().__init__(f"class {label} has {available} samples but the partition needs {needed}.")


class Dataset(BaseModel):
    """A feature matrix with class labels or regression targets."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: Matrix
    """One sample per row."""
    targets: np.ndarray
    """Class indices, shape (n,), or regression targets, shape (n, output_dim)."""
    kind: DATASET_KIND
    n_classes: int | None = None
    """The number of classes (classification only)."""
    true_fn: Callable[[np.ndarray], np.ndarray] | None = Field(default=None, exclude=True)
    """The noiseless target function (synthetic regression only)."""

    @model_validator(mode="after")
    def validator_targets_match_features(self) -> Dataset:
        if self.targets.shape[0] != self.features.rows:
            raise ValueError(f"{self.features.rows} feature rows but {self.targets.shape[0]} targets.")
        if self.kind == DATASET_KIND.classification:
            if self.n_classes is None:
                raise ValueError("A classification dataset needs n_classes.")
            if self.targets.ndim != 1 or not np.issubdtype(self.targets.dtype, np.integer):
                raise ValueError("Classification targets must be a vector of integer class indices.")
            if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= self.n_classes):
                raise ValueError(f"Classification targets must lie in [0, {self.n_classes}).")
        return self

    def __len__(self) -> int:
        return self.features.rows

    @property
    def input_dim(self) -> int:
        return self.features.cols

    @property
    def output_dim(self) -> int:
        """The network output width this dataset calls for."""
        if self.kind == DATASET_KIND.classification:
            return int(self.n_classes or 0)
        return 1 if self.targets.ndim == 1 else int(self.targets.shape[1])

    def subset(self, indices: list[int] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return the (features, targets) rows at `indices`."""
        rows = np.asarray(indices, dtype=np.int64)
        return self.features.data[rows], self.targets[rows]


class Partition(BaseModel):
    """Per-client index lists into a dataset."""

    shards: list[list[int]]
    """Training indices, one list per client."""
    test_shards: list[list[int]] = []
    """Held-out indices, one list per client, carrying only that client's labels."""
    labels_per_client: int
    client_labels: list[list[int]] = []
    """The labels assigned to each client (classification only)."""

    @model_validator(mode="after")
    def validator_disjoint(self) -> Partition:
        seen: set[int] = set()
        for shard in [*self.shards, *self.test_shards]:
            shard_set = set(shard)
            if len(shard_set) != len(shard) or seen & shard_set:
                raise ValueError("Partition shards must be disjoint.")
            seen |= shard_set
        if self.test_shards and len(self.test_shards) != len(self.shards):
            raise ValueError("There must be one test shard per client.")
        return self

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    @property
    def union_test_indices(self) -> list[int]:
        """Every client's test indices, in ascending client order."""
        return [index for shard in self.test_shards for index in shard]


class SplitSpec(BaseModel):
    """How many train and test samples each client gets per assigned label."""

    train_per_class: int = Field(ge=1)
    test_per_class: int = Field(ge=1)
    tier: SPLIT_TIER

    @classmethod
    def from_tier(cls, tier: SPLIT_TIER) -> SplitSpec:
        train, test = get_split_sizes(tier)
        return cls(train_per_class=train, test_per_class=test, tier=tier)


class SmoothTargetFunction(BaseModel):
    """A fixed random two-layer tanh network used as the true regression function."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    hidden_weight: np.ndarray
    hidden_bias: np.ndarray
    output_weight: np.ndarray
    output_bias: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        inputs = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.tanh(inputs @ self.hidden_weight.T + self.hidden_bias) @ self.output_weight.T + self.output_bias


def make_smooth_target_function(
    input_dim: int,
    seed: int,
    *,
    hidden: int = 16,
    output_dim: int = 1,
) -> SmoothTargetFunction:
    generator = stream_for(seed, RNG_PURPOSE.data, "synth_regression", "function").generator()
    return SmoothTargetFunction(
        hidden_weight=generator.standard_normal((hidden, input_dim)) * 2.0 / np.sqrt(input_dim),
        hidden_bias=generator.standard_normal(hidden) * 0.5,
        output_weight=generator.standard_normal((output_dim, hidden)) / np.sqrt(hidden),
        output_bias=np.zeros(output_dim),
    )


def gen_synth_regression(
    n: int,
    input_dim: int,
    sigma_eps: float,
    seed: int,
    *,
    fn_seed: int | None = None,
    hidden: int = 16,
) -> Dataset:
    """Sample y = f(x) + eps with x uniform in [-1, 1]^input_dim and eps ~ N(0, sigma_eps^2).

    Args:
        n (int): The number of samples.
        input_dim (int): The input dimension.
        sigma_eps (float): The noise standard deviation; 0 gives noiseless targets.
        seed (int): Seeds the samples and, unless `fn_seed` is given, the target function.
        fn_seed (int | None): Seeds the target function separately, so sample sizes can vary under one function.
        hidden (int): The hidden width of the target function.

    Returns:
        Dataset: A regression dataset that keeps `true_fn` for the Hellinger metric.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}.")
    if sigma_eps < 0:
        raise ValueError(f"sigma_eps must be non-negative, got {sigma_eps}.")
    true_fn = make_smooth_target_function(input_dim, seed if fn_seed is None else fn_seed, hidden=hidden)
    generator = stream_for(seed, RNG_PURPOSE.data, "synth_regression", "samples").generator()
    features = generator.uniform(-1.0, 1.0, size=(n, input_dim))
    noise = generator.standard_normal((n, 1))
    targets = true_fn(features) + sigma_eps * noise
    return Dataset(
        features=Matrix(data=features),
        targets=targets,
        kind=DATASET_KIND.regression,
        true_fn=true_fn,
    )


def blob_centers(classes: int, input_dim: int, seed: int) -> np.ndarray:
    """The seeded cluster centers `gen_blobs` draws around, one row per class."""
    return stream_for(seed, RNG_PURPOSE.data, "blobs", "centers").generator().standard_normal((classes, input_dim))


def gen_blobs(classes: int, per_class: int, input_dim: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters, `per_class` samples around each of `classes` seeded centers, grouped by class."""
    if classes < 2:
        raise ValueError(f"Blobs need at least 2 classes, got {classes}.")
    centers = blob_centers(classes, input_dim, seed)
    generator = stream_for(seed, RNG_PURPOSE.data, "blobs", "samples").generator()
    noise = generator.standard_normal((classes * per_class, input_dim))
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    return Dataset(
        features=Matrix(data=centers[labels] + spread * noise),
        targets=labels,
        kind=DATASET_KIND.classification,
        n_classes=classes,
    )


def _read_idx_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        return gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, n_dims: int, path: str | Path) -> tuple[tuple[int, ...], np.ndarray]:
    header_size = 4 + 4 * n_dims
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path} is too short to hold an IDX magic number.")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise IdxMagicError(f"{path} has magic 0x{magic:08x}, expected 0x{expected_magic:08x}.")
    if len(raw) < header_size:
        raise IdxTruncatedError(f"{path} ends inside its IDX header.")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=n_dims, offset=4))
    payload_size = int(np.prod(dims))
    available = len(raw) - header_size
    if available < payload_size:
        raise IdxTruncatedError(f"{path} declares {payload_size} payload bytes but holds {available}.")
    if available > payload_size:
        logger.warning(f"{path} has {available - payload_size} trailing bytes after its payload, ignoring them.")
    payload = np.frombuffer(raw, dtype=np.uint8, count=payload_size, offset=header_size)
    return dims, payload


def load_idx(images_path: str | Path, labels_path: str | Path, *, n_classes: int | None = None) -> Dataset:
    """Load an IDX image/label file pair (MNIST, Fashion-MNIST), plain or gzip-compressed.

    Pixels are scaled to [0, 1] and every image is flattened to one row.

    Args:
        images_path (str | Path): The `idx3-ubyte` images file.
        labels_path (str | Path): The `idx1-ubyte` labels file.
        n_classes (int | None): The class count. Defaults to the largest label plus one.

    Returns:
        Dataset: The classification dataset.

    Raises:
        IdxMagicError: A file does not carry the magic number of its role.
        IdxTruncatedError: A file ends before its header or payload.
        IdxCountMismatchError: The files hold different numbers of items.
    """
    (count, rows, cols), pixels = _parse_idx(_read_idx_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    (label_count,), labels = _parse_idx(_read_idx_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if count != label_count:
        raise IdxCountMismatchError(f"{images_path} holds {count} images, {labels_path} holds {label_count} labels.")

    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    targets = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(targets.max()) + 1 if targets.size else 1
    logger.debug(f"Loaded {count} IDX images of {rows}x{cols} from {images_path}")
    return Dataset(
        features=Matrix(data=features),
        targets=targets,
        kind=DATASET_KIND.classification,
        n_classes=n_classes,
    )


def write_idx(
    images: np.ndarray,
    labels: np.ndarray,
    images_path: str | Path,
    labels_path: str | Path,
    *,
    compress: bool = False,
) -> None:
    """Write unsigned-byte images, shape (count, rows, cols), and labels in the IDX layout `load_idx` reads."""
    image_bytes = np.asarray(images, dtype=np.uint8)
    label_bytes = np.asarray(labels, dtype=np.uint8)
    if image_bytes.ndim != 3:
        raise ValueError(f"Images must have shape (count, rows, cols), got {image_bytes.shape}.")
    image_header = np.array([IDX_IMAGES_MAGIC, *image_bytes.shape], dtype=">u4").tobytes()
    label_header = np.array([IDX_LABELS_MAGIC, label_bytes.shape[0]], dtype=">u4").tobytes()
    for path, content in (
        (images_path, image_header + image_bytes.tobytes()),
        (labels_path, label_header + label_bytes.tobytes()),
    ):
        Path(path).write_bytes(gzip.compress(content, mtime=0) if compress else content)


def merge_datasets(first: Dataset, second: Dataset) -> Dataset:
    """Concatenate two datasets of the same kind, e.g. the MNIST train and test files before tier splitting."""
    if first.kind != second.kind or first.input_dim != second.input_dim:
        raise ValueError("Only datasets of the same kind and input width can be merged.")
    n_classes = None
    if first.kind == DATASET_KIND.classification:
        n_classes = max(int(first.n_classes or 0), int(second.n_classes or 0))
    return Dataset(
        features=Matrix(data=np.concatenate([first.features.data, second.features.data])),
        targets=np.concatenate([first.targets, second.targets]),
        kind=first.kind,
        n_classes=n_classes,
        true_fn=first.true_fn,
    )


def assign_client_labels(n_classes: int, n_clients: int, labels_per_client: int, seed: int) -> list[list[int]]:
    """A balanced label design: every client gets `labels_per_client` distinct labels and every label is held by
    the same number of clients, give or take one.

    Each client takes the least-held labels so far, ties broken by a seeded random priority.
    """
    if not 1 <= labels_per_client <= n_classes:
        raise ValueError(f"labels_per_client must be within [1, {n_classes}], got {labels_per_client}.")
    generator = stream_for(seed, RNG_PURPOSE.partition, "labels").generator()
    holders = np.zeros(n_classes, dtype=np.int64)
    assignment = []
    for _ in range(n_clients):
        priority = generator.permutation(n_classes)
        order = np.lexsort((priority, holders))
        chosen = sorted(int(label) for label in order[:labels_per_client])
        holders[chosen] += 1
        assignment.append(chosen)
    return assignment


def partition_label_skew(
    data: Dataset,
    n_clients: int,
    labels_per_client: int,
    per_class_train: int,
    seed: int,
    *,
    per_class_test: int = 0,
) -> Partition:
    """Split a classification dataset so every client only holds `labels_per_client` of the labels.

    For every assigned label a client receives `per_class_train` training and `per_class_test` test samples, taken
    as contiguous runs of a seeded shuffle of that label's samples, so no sample is shared between clients.

    Raises:
        InsufficientSamplesError: A label does not hold enough samples for all clients assigned to it.
    """
    if data.kind != DATASET_KIND.classification or data.n_classes is None:
        raise TypeError("Label-skew partitioning needs a classification dataset.")
    if n_clients < 1:
        raise ValueError(f"n_clients must be at least 1, got {n_clients}.")
    client_labels = assign_client_labels(data.n_classes, n_clients, labels_per_client, seed)
    per_client = per_class_train + per_class_test

    shards: list[list[int]] = [[] for _ in range(n_clients)]
    test_shards: list[list[int]] = [[] for _ in range(n_clients)]
    for label in range(data.n_classes):
        holders = [client for client, labels in enumerate(client_labels) if label in labels]
        if not holders:
            continue
        label_indices = np.flatnonzero(data.targets == label)
        needed = per_client * len(holders)
        if label_indices.size < needed:
            raise InsufficientSamplesError(label, int(label_indices.size), needed)
        shuffled = stream_for(seed, RNG_PURPOSE.partition, "class", label).generator().permutation(label_indices)
        for position, client in enumerate(holders):
            start = position * per_client
            shards[client].extend(int(i) for i in shuffled[start : start + per_class_train])
            test_shards[client].extend(int(i) for i in shuffled[start + per_class_train : start + per_client])

    logger.debug(f"Partitioned {len(data)} samples over {n_clients} clients with {labels_per_client} labels each")
    return Partition(
        shards=shards,
        test_shards=test_shards if per_class_test > 0 else [],
        labels_per_client=labels_per_client,
        client_labels=client_labels,
    )


def partition_iid(
    data: Dataset,
    n_clients: int,
    per_client_train: int,
    seed: int,
    *,
    per_client_test: int = 0,
) -> Partition:
    """An i.i.d. split.

    Classification datasets are split stratified, every client holding every label with `per_client_train`
    training samples per label. Regression datasets are split into contiguous runs of a seeded shuffle.
    """
    if data.kind == DATASET_KIND.classification and data.n_classes is not None:
        return partition_label_skew(
            data,
            n_clients,
            data.n_classes,
            per_client_train,
            seed,
            per_class_test=per_client_test,
        )
    per_client = per_client_train + per_client_test
    if per_client * n_clients > len(data):
        raise ValueError(f"{n_clients} clients of {per_client} samples need more than the {len(data)} available.")
    shuffled = stream_for(seed, RNG_PURPOSE.partition, "iid").generator().permutation(len(data))
    shards = []
    test_shards = []
    for client in range(n_clients):
        start = client * per_client
        shards.append([int(i) for i in shuffled[start : start + per_client_train]])
        test_shards.append([int(i) for i in shuffled[start + per_client_train : start + per_client]])
    return Partition(
        shards=shards,
        test_shards=test_shards if per_client_test > 0 else [],
        labels_per_client=0,
    )
