from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from pfedbayes.data import (
    IDX_IMAGES_MAGIC,
    Dataset,
    IdxCountMismatchError,
    IdxFormatError,
    IdxMagicError,
    IdxTruncatedError,
    InsufficientSamplesError,
    Partition,
    SplitSpec,
    assign_client_labels,
    blob_centers,
    gen_blobs,
    gen_synth_regression,
    load_idx,
    merge_datasets,
    partition_iid,
    partition_label_skew,
    write_idx,
)
from pfedbayes.meta_consts import DATASET_KIND, SPLIT_TIER
from pfedbayes.path_consts import MNIST_TRAIN_IMAGES_FILENAME, MNIST_TRAIN_LABELS_FILENAME, find_mnist_file
from pfedbayes.tensor import Matrix


def nearest_centroid_accuracy(data: Dataset, centers: np.ndarray) -> float:
    distances = ((data.features.data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(distances, axis=1) == data.targets))


def test_synth_regression_noiseless():
    data = gen_synth_regression(n=50, input_dim=3, sigma_eps=0.0, seed=1)
    assert data.true_fn is not None
    assert np.array_equal(data.targets, data.true_fn(data.features.data))
    assert data.kind == DATASET_KIND.regression
    assert np.all(np.abs(data.features.data) <= 1.0)


def test_synth_regression_is_deterministic():
    first = gen_synth_regression(n=40, input_dim=2, sigma_eps=0.3, seed=9)
    second = gen_synth_regression(n=40, input_dim=2, sigma_eps=0.3, seed=9)
    assert np.array_equal(first.features.data, second.features.data)
    assert np.array_equal(first.targets, second.targets)
    other = gen_synth_regression(n=40, input_dim=2, sigma_eps=0.3, seed=10)
    assert not np.array_equal(first.targets, other.targets)


def test_synth_regression_noise_variance():
    sigma_eps = 0.4
    data = gen_synth_regression(n=100_000, input_dim=2, sigma_eps=sigma_eps, seed=4)
    assert data.true_fn is not None
    residual = data.targets - data.true_fn(data.features.data)
    assert sigma_eps**2 * 0.95 <= residual.var() <= sigma_eps**2 * 1.05


def test_synth_regression_shared_function():
    x = np.linspace(-1.0, 1.0, 7).reshape(-1, 1)
    small = gen_synth_regression(n=10, input_dim=1, sigma_eps=0.1, seed=1, fn_seed=100)
    large = gen_synth_regression(n=500, input_dim=1, sigma_eps=0.1, seed=2, fn_seed=100)
    assert small.true_fn is not None and large.true_fn is not None
    assert np.array_equal(small.true_fn(x), large.true_fn(x))


def test_synth_regression_needs_samples():
    with pytest.raises(ValueError):
        gen_synth_regression(n=0, input_dim=1, sigma_eps=0.1, seed=0)


def test_blobs_per_class_counts():
    data = gen_blobs(classes=5, per_class=13, input_dim=4, spread=1.0, seed=2)
    assert len(data) == 65
    assert Counter(data.targets.tolist()) == {label: 13 for label in range(5)}
    assert data.n_classes == 5
    assert data.output_dim == 5


def test_blobs_separable_limit():
    data = gen_blobs(classes=10, per_class=20, input_dim=5, spread=1e-9, seed=3)
    assert nearest_centroid_accuracy(data, blob_centers(10, 5, 3)) == 1.0


def test_blobs_overlapping_limit():
    centers = blob_centers(10, 5, 3)
    pairwise = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    center_distance = pairwise[np.triu_indices(10, k=1)].mean()
    data = gen_blobs(classes=10, per_class=200, input_dim=5, spread=3.0 * center_distance, seed=3)
    assert nearest_centroid_accuracy(data, centers) < 0.9


def test_blobs_need_two_classes():
    with pytest.raises(ValueError):
        gen_blobs(classes=1, per_class=5, input_dim=2, spread=1.0, seed=0)


def test_dataset_validation():
    with pytest.raises(ValidationError):
        Dataset(features=Matrix.zeros(3, 2), targets=np.array([0, 1]), kind=DATASET_KIND.classification, n_classes=2)
    with pytest.raises(ValidationError):
        Dataset(features=Matrix.zeros(2, 2), targets=np.array([0, 2]), kind=DATASET_KIND.classification, n_classes=2)


def test_load_idx_fixture(idx_fixture_folder: Path):
    data = load_idx(idx_fixture_folder / "images-idx3-ubyte", idx_fixture_folder / "labels-idx1-ubyte")
    assert data.features.data.tolist() == [[0.0, 1.0, 128 / 255, 64 / 255], [1.0, 0.0, 0.0, 1.0]]
    assert data.targets.tolist() == [3, 7]
    assert data.n_classes == 8


def test_load_idx_gzip(idx_fixture_folder: Path):
    plain = load_idx(idx_fixture_folder / "images-idx3-ubyte", idx_fixture_folder / "labels-idx1-ubyte")
    compressed = load_idx(idx_fixture_folder / "images-idx3-ubyte.gz", idx_fixture_folder / "labels-idx1-ubyte.gz")
    assert np.array_equal(plain.features.data, compressed.features.data)
    assert np.array_equal(plain.targets, compressed.targets)


def test_load_idx_wrong_magic(idx_fixture_folder: Path):
    images = idx_fixture_folder / "images-idx3-ubyte"
    with pytest.raises(IdxMagicError):
        load_idx(images, images)


def test_load_idx_truncated(base_path_for_tests: Path, idx_fixture_folder: Path):
    full = (idx_fixture_folder / "images-idx3-ubyte").read_bytes()
    labels = idx_fixture_folder / "labels-idx1-ubyte"
    truncated_payload = base_path_for_tests / "truncated-payload-idx3-ubyte"
    truncated_payload.write_bytes(full[:-1])
    with pytest.raises(IdxTruncatedError):
        load_idx(truncated_payload, labels)

    truncated_header = base_path_for_tests / "truncated-header-idx3-ubyte"
    truncated_header.write_bytes(full[:10])
    with pytest.raises(IdxTruncatedError):
        load_idx(truncated_header, labels)


def test_load_idx_count_mismatch(base_path_for_tests: Path):
    images = base_path_for_tests / "mismatch-images-idx3-ubyte"
    labels = base_path_for_tests / "mismatch-labels-idx1-ubyte"
    write_idx(np.zeros((2, 2, 2), dtype=np.uint8), np.array([1, 2, 3], dtype=np.uint8), images, labels)
    with pytest.raises(IdxCountMismatchError) as exc_info:
        load_idx(images, labels)
    assert isinstance(exc_info.value, IdxFormatError)


def test_idx_round_trip(base_path_for_tests: Path):
    generator = np.random.default_rng(12)
    images = generator.integers(0, 256, size=(6, 3, 5), dtype=np.uint8)
    labels = generator.integers(0, 10, size=6, dtype=np.uint8)
    images_path = base_path_for_tests / "round-trip-idx3-ubyte"
    labels_path = base_path_for_tests / "round-trip-idx1-ubyte"
    write_idx(images, labels, images_path, labels_path)

    assert int.from_bytes(images_path.read_bytes()[:4], "big") == IDX_IMAGES_MAGIC
    data = load_idx(images_path, labels_path, n_classes=10)
    assert np.array_equal(np.rint(data.features.data * 255).astype(np.uint8), images.reshape(6, 15))
    assert np.array_equal(data.targets, labels.astype(np.int64))


def test_official_mnist_train_files():
    images = find_mnist_file(MNIST_TRAIN_IMAGES_FILENAME)
    labels = find_mnist_file(MNIST_TRAIN_LABELS_FILENAME)
    if images is None or labels is None:
        pytest.skip("MNIST files not available; set PFEDBAYES_MNIST_DIR")
    data = load_idx(images, labels)
    assert (len(data), data.input_dim) == (60_000, 784)
    assert data.n_classes == 10


def test_merge_datasets(small_blobs: Dataset):
    merged = merge_datasets(small_blobs, small_blobs)
    assert len(merged) == 2 * len(small_blobs)
    assert merged.n_classes == small_blobs.n_classes
    with pytest.raises(ValueError):
        merge_datasets(small_blobs, gen_synth_regression(n=5, input_dim=3, sigma_eps=0.1, seed=0))


def test_split_spec_tiers():
    small = SplitSpec.from_tier(SPLIT_TIER.small)
    assert (small.train_per_class, small.test_per_class, small.tier) == (50, 950, SPLIT_TIER.small)
    assert SplitSpec.from_tier(SPLIT_TIER.medium).train_per_class == 200
    assert SplitSpec.from_tier(SPLIT_TIER.large).test_per_class == 300
    with pytest.raises(ValidationError):
        SplitSpec(train_per_class=0, test_per_class=1, tier=SPLIT_TIER.small)


def check_label_skew(data: Dataset, partition: Partition, labels_per_client: int, per_class_train: int) -> None:
    for client, shard in enumerate(partition.shards):
        labels = set(data.targets[shard].tolist())
        assert labels == set(partition.client_labels[client])
        assert len(labels) == labels_per_client
        assert Counter(data.targets[shard].tolist()) == {label: per_class_train for label in labels}
    for client, shard in enumerate(partition.test_shards):
        assert set(data.targets[shard].tolist()) <= set(partition.client_labels[client])
    all_indices = [index for shard in [*partition.shards, *partition.test_shards] for index in shard]
    assert len(all_indices) == len(set(all_indices))


def test_label_skew_ten_clients_five_labels():
    data = gen_blobs(classes=10, per_class=5 * 30, input_dim=3, spread=1.0, seed=0)
    partition = partition_label_skew(data, 10, 5, 20, seed=1, per_class_test=10)
    holders = Counter(label for labels in partition.client_labels for label in labels)
    assert holders == {label: 5 for label in range(10)}
    check_label_skew(data, partition, 5, 20)
    assert all(len(shard) == 50 for shard in partition.test_shards)


def test_label_skew_single_client_takes_everything(small_blobs: Dataset):
    partition = partition_label_skew(small_blobs, 1, 4, 60, seed=0)
    assert sorted(partition.shards[0]) == list(range(len(small_blobs)))
    assert partition.test_shards == []


@pytest.mark.parametrize("seed", range(8))
def test_label_skew_random_configs(seed: int):
    generator = np.random.default_rng(seed)
    classes = int(generator.integers(2, 8))
    n_clients = int(generator.integers(1, 9))
    labels_per_client = int(generator.integers(1, classes + 1))
    per_class_train = int(generator.integers(1, 6))
    per_class_test = int(generator.integers(0, 3))
    per_class = n_clients * (per_class_train + per_class_test)
    data = gen_blobs(classes, per_class=per_class, input_dim=2, spread=1.0, seed=seed)
    partition = partition_label_skew(
        data,
        n_clients,
        labels_per_client,
        per_class_train,
        seed=seed,
        per_class_test=per_class_test,
    )
    holders = Counter(label for labels in partition.client_labels for label in labels)
    counts = [holders.get(label, 0) for label in range(classes)]
    assert max(counts) - min(counts) <= 1
    check_label_skew(data, partition, labels_per_client, per_class_train)


def test_label_skew_is_deterministic(small_blobs: Dataset):
    first = partition_label_skew(small_blobs, 4, 2, 10, seed=5, per_class_test=5)
    second = partition_label_skew(small_blobs, 4, 2, 10, seed=5, per_class_test=5)
    assert first == second


def test_label_skew_insufficient_samples(small_blobs: Dataset):
    with pytest.raises(InsufficientSamplesError, match="class") as exc_info:
        partition_label_skew(small_blobs, 4, 4, 50, seed=0)
    assert 0 <= exc_info.value.label < 4
    assert exc_info.value.available == 60


def test_label_skew_rejects_bad_requests(small_blobs: Dataset, small_regression: Dataset):
    with pytest.raises(ValueError):
        partition_label_skew(small_blobs, 2, 5, 1, seed=0)
    with pytest.raises(TypeError):
        partition_label_skew(small_regression, 2, 1, 1, seed=0)


def test_assign_client_labels_balanced():
    assignment = assign_client_labels(n_classes=7, n_clients=5, labels_per_client=3, seed=11)
    assert all(len(set(labels)) == 3 for labels in assignment)
    holders = Counter(label for labels in assignment for label in labels)
    assert max(holders.values()) - min(holders.get(label, 0) for label in range(7)) <= 1


def test_partition_iid_regression(small_regression: Dataset):
    partition = partition_iid(small_regression, 3, 30, seed=2, per_client_test=10)
    assert [len(shard) for shard in partition.shards] == [30, 30, 30]
    assert [len(shard) for shard in partition.test_shards] == [10, 10, 10]
    with pytest.raises(ValueError):
        partition_iid(small_regression, 3, 40, seed=2, per_client_test=1)


def test_partition_iid_classification_holds_every_label(small_blobs: Dataset):
    partition = partition_iid(small_blobs, 3, 10, seed=0, per_client_test=5)
    check_label_skew(small_blobs, partition, 4, 10)


def test_partition_rejects_overlap():
    with pytest.raises(ValidationError):
        Partition(shards=[[0, 1], [1, 2]], labels_per_client=1)
