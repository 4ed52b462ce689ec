"""Experiment configuration, dataset preparation and seeded end-to-end runs with CSV output."""

from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from dotenv.parser import Binding, parse_stream
from loguru import logger
from pydantic import ConfigDict, Field, ValidationError, field_validator, model_validator

from pfedbayes import path_consts
from pfedbayes.baselines import FedAvgRunner
from pfedbayes.bnn import NetworkArch
from pfedbayes.data import (
    Dataset,
    IdxFormatError,
    Partition,
    SplitSpec,
    gen_blobs,
    gen_synth_regression,
    load_idx,
    merge_datasets,
    partition_iid,
    partition_label_skew,
)
from pfedbayes.federation import (
    BaseFederatedRunner,
    FedConfig,
    FederatedResult,
    PFedBayesRunner,
    RoundRecord,
    TrainingDivergedError,
)
from pfedbayes.meta_consts import (
    ALGORITHM,
    DATASET_KIND,
    DATASET_KIND_LOOKUP,
    DATASET_NAME,
    DEFAULT_HIDDEN_WIDTH,
    DEFAULT_REGRESSION_HIDDEN_WIDTH,
    DEFAULT_SIGMA_EPS,
    LIKELIHOOD,
    MNIST_NUM_CLASSES,
    SPLIT_TIER,
)

ROUNDS_CSV_COLUMNS = ["round", "pm_acc", "gm_acc", "mean_loss", "mean_kl", "hellinger", "wall_ms"]
CSV_FLOAT_FORMAT = "%.6g"

MNIST_FILENAMES = [
    path_consts.MNIST_TRAIN_IMAGES_FILENAME,
    path_consts.MNIST_TRAIN_LABELS_FILENAME,
    path_consts.MNIST_TEST_IMAGES_FILENAME,
    path_consts.MNIST_TEST_LABELS_FILENAME,
]


class ConfigError(ValueError):
    """An experiment setting could not be accepted; `key` names it."""

    key: str

    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ExperimentConfig(FedConfig):
    """A complete experiment: what to train, on what data, and where to write the results."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    algorithm: ALGORITHM = ALGORITHM.pfedbayes
    dataset: DATASET_NAME = DATASET_NAME.blobs
    tier: SPLIT_TIER = SPLIT_TIER.small
    train_per_class: int | None = Field(default=None, ge=1)
    """Overrides the tier's training samples per client and assigned label."""
    test_per_class: int | None = Field(default=None, ge=1)
    """Overrides the tier's test samples per client and assigned label."""
    n_clients: int = Field(default=10, ge=1)
    labels_per_client: int = Field(default=5, ge=1)

    hidden_widths: list[int] | None = None
    """The hidden layer widths. Defaults to one layer of 100 for classification and of 8 for regression."""
    sigma_eps: float = Field(default=DEFAULT_SIGMA_EPS, gt=0.0)
    """The observation noise of the synthetic regression data and of the gaussian likelihood."""

    blob_classes: int = Field(default=10, ge=2)
    blob_input_dim: int = Field(default=20, ge=1)
    blob_spread: float = Field(default=3.0, ge=0.0)
    """The within-class noise scale relative to the unit-variance class centers."""

    regression_input_dim: int = Field(default=1, ge=1)
    regression_train_per_client: int = Field(default=50, ge=1)
    regression_test_per_client: int = Field(default=200, ge=1)

    mnist_dir: Path | None = None
    """The folder holding the four MNIST IDX files. Defaults to the MNIST folder of path_consts."""
    output_dir: Path = path_consts.RUNS_FOLDER
    workers: int = Field(default=1, ge=1)
    """The number of threads running client updates. Never changes the results."""

    @field_validator("hidden_widths", mode="before")
    @classmethod
    def validator_hidden_widths(cls, value: object) -> object:
        """Accept a comma separated string, an empty string meaning no hidden layer."""
        if isinstance(value, str):
            return [int(width) for width in value.split(",") if width.strip()]
        return value

    @model_validator(mode="after")
    def validator_experiment(self) -> ExperimentConfig:
        if self.subset_size > self.n_clients:
            raise ValueError(f"subset_size ({self.subset_size}) cannot exceed n_clients ({self.n_clients}).")
        if any(width < 1 for width in self.network_hidden_widths):
            raise ValueError("Every hidden width must be at least 1.")
        if self.dataset_kind == DATASET_KIND.classification and self.labels_per_client > self.n_classes:
            raise ValueError(f"labels_per_client cannot exceed the {self.n_classes} classes.")
        if self.dataset == DATASET_NAME.mnist:
            missing = [
                name
                for name in MNIST_FILENAMES
                if path_consts.find_mnist_file(name, base_path=self.mnist_folder) is None
            ]
            if missing:
                raise ValueError(f"MNIST files {missing} not found in {self.mnist_folder}.")
        return self

    @property
    def dataset_kind(self) -> DATASET_KIND:
        return DATASET_KIND_LOOKUP[self.dataset]

    @property
    def network_hidden_widths(self) -> list[int]:
        if self.hidden_widths is not None:
            return self.hidden_widths
        if self.dataset_kind == DATASET_KIND.regression:
            return [DEFAULT_REGRESSION_HIDDEN_WIDTH]
        return [DEFAULT_HIDDEN_WIDTH]

    @property
    def n_classes(self) -> int:
        return MNIST_NUM_CLASSES if self.dataset == DATASET_NAME.mnist else self.blob_classes

    @property
    def mnist_folder(self) -> Path:
        return self.mnist_dir if self.mnist_dir is not None else path_consts.MNIST_FOLDER

    @property
    def split(self) -> SplitSpec:
        """The tier's per-label sample counts, with any explicit overrides applied."""
        spec = SplitSpec.from_tier(self.tier)
        return spec.model_copy(
            update={
                "train_per_class": self.train_per_class or spec.train_per_class,
                "test_per_class": self.test_per_class or spec.test_per_class,
            },
        )

    def fed_config(self) -> FedConfig:
        return FedConfig.model_validate(self.model_dump(include=set(FedConfig.model_fields)))


def _binding_line(binding: Binding) -> int:
    """The line a binding starts on, past any blank lines the parser folded into it."""
    text = binding.original.string
    return binding.original.line + text[: len(text) - len(text.lstrip())].count("\n")


def read_config_file(file_path: str | Path) -> dict[str, str]:
    """Read a flat dotenv-style `key=value` file. Blank lines and `#` comments are skipped.

    Raises:
        ConfigError: A line is not a `key=value` pair.
        OSError: The file cannot be read.
    """
    text = Path(file_path).read_text(encoding="utf-8")
    seen: set[str] = set()
    for binding in parse_stream(io.StringIO(text)):
        if binding.error or (binding.key is not None and binding.value is None):
            message = f"line {_binding_line(binding)} of {file_path} is not a key=value pair."
            raise ConfigError(binding.key or "", message)
        if binding.key is None:
            continue
        if binding.key in seen:
            logger.warning(f"{file_path} sets {binding.key} more than once; the last value wins.")
        seen.add(binding.key)
    values = dotenv_values(stream=io.StringIO(text), interpolate=False)
    return {key: value for key, value in values.items() if value is not None}


def parse_config(
    file_path: str | Path | None = None,
    overrides: dict[str, object] | None = None,
) -> ExperimentConfig:
    """Build an `ExperimentConfig` from a config file and overrides (which win over the file).

    Absent keys take their defaults; an empty value means the default as well.

    Raises:
        ConfigError: A key is unknown, a value has the wrong type, or a constraint is violated.
    """
    raw: dict[str, object] = dict(read_config_file(file_path)) if file_path is not None else {}
    raw.update({key: value for key, value in (overrides or {}).items() if value is not None})
    raw = {key: value for key, value in raw.items() if value != ""}

    for key in raw:
        if key not in ExperimentConfig.model_fields:
            raise ConfigError(key, "unknown setting.")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        key = str(first["loc"][0]) if first["loc"] else ""
        raise ConfigError(key, first["msg"]) from e


def build_arch(cfg: ExperimentConfig, data: Dataset) -> NetworkArch:
    widths = [data.input_dim, *cfg.network_hidden_widths, data.output_dim]
    if data.kind == DATASET_KIND.regression:
        return NetworkArch(layer_widths=widths, likelihood=LIKELIHOOD.gaussian, sigma_eps=cfg.sigma_eps)
    return NetworkArch(layer_widths=widths, likelihood=LIKELIHOOD.categorical)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    """Load or generate the configured dataset, sized for the configured partition."""
    if cfg.dataset == DATASET_NAME.mnist:
        paths = [path_consts.find_mnist_file(name, base_path=cfg.mnist_folder) for name in MNIST_FILENAMES]
        if any(path is None for path in paths):
            raise FileNotFoundError(f"MNIST files are missing from {cfg.mnist_folder}.")
        train_images, train_labels, test_images, test_labels = paths
        assert train_images and train_labels and test_images and test_labels
        return merge_datasets(
            load_idx(train_images, train_labels, n_classes=MNIST_NUM_CLASSES),
            load_idx(test_images, test_labels, n_classes=MNIST_NUM_CLASSES),
        )
    if cfg.dataset == DATASET_NAME.blobs:
        split = cfg.split
        holders_per_label = math.ceil(cfg.n_clients * cfg.labels_per_client / cfg.blob_classes)
        per_class = holders_per_label * (split.train_per_class + split.test_per_class)
        return gen_blobs(cfg.blob_classes, per_class, cfg.blob_input_dim, cfg.blob_spread, cfg.seed)

    n = cfg.n_clients * (cfg.regression_train_per_client + cfg.regression_test_per_client)
    return gen_synth_regression(n, cfg.regression_input_dim, cfg.sigma_eps, cfg.seed)


def build_partition(cfg: ExperimentConfig, data: Dataset) -> Partition:
    if data.kind == DATASET_KIND.regression:
        return partition_iid(
            data,
            cfg.n_clients,
            cfg.regression_train_per_client,
            cfg.seed,
            per_client_test=cfg.regression_test_per_client,
        )
    split = cfg.split
    return partition_label_skew(
        data,
        cfg.n_clients,
        cfg.labels_per_client,
        split.train_per_class,
        cfg.seed,
        per_class_test=split.test_per_class,
    )


def make_runner(cfg: ExperimentConfig, arch: NetworkArch, data: Dataset, partition: Partition) -> BaseFederatedRunner:
    runner_type = FedAvgRunner if cfg.algorithm == ALGORITHM.fedavg else PFedBayesRunner
    return runner_type(cfg.fed_config(), arch, data, partition, workers=cfg.workers)


def rounds_frame(records: list[RoundRecord]) -> pd.DataFrame:
    rows = [
        {
            "round": record.round,
            "pm_acc": record.pm_acc,
            "gm_acc": record.gm_acc,
            "mean_loss": record.mean_client_loss,
            "mean_kl": record.mean_kl,
            "hellinger": record.hellinger,
            "wall_ms": record.wall_ms,
        }
        for record in records
    ]
    return pd.DataFrame(rows, columns=ROUNDS_CSV_COLUMNS)


def _best(frame: pd.DataFrame, column: str, *, highest: bool = True) -> tuple[float | None, int | None]:
    values = pd.to_numeric(frame[column], errors="coerce")
    if values.isna().all():
        return None, None
    position = values.idxmax() if highest else values.idxmin()
    return float(values[position]), int(frame["round"][position])


def _last(frame: pd.DataFrame, column: str) -> float | None:
    values = pd.to_numeric(frame[column], errors="coerce").dropna()
    return float(values.iloc[-1]) if len(values) else None


def _last_entropy(records: list[RoundRecord], field: str) -> float | None:
    values = [getattr(record, field) for record in records if getattr(record, field) is not None]
    return float(values[-1]) if values else None


def summary_frame(cfg: ExperimentConfig, records: list[RoundRecord]) -> pd.DataFrame:
    """One row: the best accuracies over all rounds and the rounds they were reached in, plus final values."""
    frame = rounds_frame(records)
    best_pm_acc, best_pm_round = _best(frame, "pm_acc")
    best_gm_acc, best_gm_round = _best(frame, "gm_acc")
    min_hellinger, _ = _best(frame, "hellinger", highest=False)
    row = {
        "algorithm": str(cfg.algorithm),
        "dataset": str(cfg.dataset),
        "tier": str(cfg.tier),
        "rounds": cfg.rounds,
        "seed": cfg.seed,
        "best_pm_acc": best_pm_acc,
        "best_pm_round": best_pm_round,
        "best_gm_acc": best_gm_acc,
        "best_gm_round": best_gm_round,
        "final_pm_acc": _last(frame, "pm_acc"),
        "final_gm_acc": _last(frame, "gm_acc"),
        "final_mean_kl": _last(frame, "mean_kl"),
        "final_pm_entropy": _last_entropy(records, "pm_entropy"),
        "final_gm_entropy": _last_entropy(records, "gm_entropy"),
        "min_hellinger": min_hellinger,
    }
    return pd.DataFrame([row])


def write_results(cfg: ExperimentConfig, result: FederatedResult) -> dict[str, Path]:
    """Write rounds.csv, summary.csv and final_state.npz into the output folder."""
    paths = path_consts.get_run_output_paths(cfg.output_dir)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    for frame, path in (
        (rounds_frame(result.records), paths["rounds"]),
        (summary_frame(cfg, result.records), paths["summary"]),
    ):
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, na_rep="", lineterminator="\n")
    np.savez(paths["final_state"], **result.final_state)
    logger.info(f"Wrote results to {cfg.output_dir}")
    return paths


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one configured experiment end to end and write its results.

    Returns:
        int: The exit status; 0 on success, 1 on a file system failure, 2 on unusable data or settings, 3 when
            training diverged.
    """
    logger.info(f"Running {cfg.algorithm} on {cfg.dataset} ({cfg.tier}) for {cfg.rounds} rounds, seed {cfg.seed}")
    try:
        data = build_dataset(cfg)
        partition = build_partition(cfg, data)
        arch = build_arch(cfg, data)
        result = make_runner(cfg, arch, data, partition).run()
        write_results(cfg, result)
    except TrainingDivergedError as e:
        logger.error(f"Training diverged: {e}. Lower eta1, eta2 or fedavg_lr.")
        return 3
    except (IdxFormatError, FileNotFoundError) as e:
        logger.error(f"Could not load the dataset: {e}")
        return 2
    except OSError as e:
        logger.error(f"Could not write the results: {e}")
        return 1
    except ValueError as e:
        logger.error(f"The experiment could not be set up: {e}")
        return 2
    return 0


def save_dataset(cfg: ExperimentConfig) -> Path:
    """Build the configured dataset and save its features and targets as an `.npz` file in the output folder."""
    data = build_dataset(cfg)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    target = Path(cfg.output_dir).joinpath(path_consts.GENERATED_DATASET_FILENAME)
    np.savez(target, features=data.features.data, targets=data.targets)
    logger.info(f"Saved {len(data)} samples of {cfg.dataset} to {target}")
    return target
