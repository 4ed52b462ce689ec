import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from loguru import logger

from pfedbayes import path_consts
from pfedbayes.cli import build_parser, main
from pfedbayes.data import write_idx
from pfedbayes.experiment import (
    ROUNDS_CSV_COLUMNS,
    ConfigError,
    ExperimentConfig,
    build_arch,
    build_dataset,
    build_partition,
    parse_config,
    read_config_file,
    run_experiment,
    save_dataset,
)
from pfedbayes.federation import FedConfig
from pfedbayes.meta_consts import AGGREGATION, ALGORITHM, DATASET_NAME, LIKELIHOOD

SMALL_BLOBS_SETTINGS = {
    "dataset": "blobs",
    "blob_classes": "4",
    "blob_input_dim": "3",
    "blob_spread": "0.5",
    "n_clients": "4",
    "labels_per_client": "2",
    "subset_size": "2",
    "train_per_class": "10",
    "test_per_class": "5",
    "hidden_widths": "8",
    "rounds": "2",
    "local_steps": "3",
    "batch_size": "10",
    "k_eval": "2",
    "zeta": "1.0",
    "eta1": "0.01",
    "eta2": "0.01",
    "seed": "3",
}


def small_config(output_dir: Path, **overrides: object) -> ExperimentConfig:
    return parse_config(overrides={**SMALL_BLOBS_SETTINGS, "output_dir": str(output_dir), **overrides})


def write_config(path: Path, settings: dict[str, str]) -> Path:
    path.write_text("".join(f"{key}={value}\n" for key, value in settings.items()), encoding="utf-8")
    return path


@pytest.fixture
def restore_logging():
    yield
    logger.remove()


def test_empty_config_file_gives_defaults(base_path_for_tests: Path):
    empty = base_path_for_tests / "empty.conf"
    empty.write_text("# nothing set\n\n", encoding="utf-8")
    assert parse_config(empty) == ExperimentConfig()
    assert parse_config() == ExperimentConfig()


def test_config_file_values(base_path_for_tests: Path):
    settings = {"zeta": "10", "beta": "0.5", "hidden_widths": "64,32"}
    config_path = write_config(base_path_for_tests / "values.conf", settings)
    cfg = parse_config(config_path)
    assert cfg.zeta == 10.0
    assert cfg.beta == 0.5
    assert cfg.hidden_widths == [64, 32]


def test_overrides_win_over_the_file(base_path_for_tests: Path):
    config_path = write_config(base_path_for_tests / "overridden.conf", {"rounds": "7", "seed": "1"})
    cfg = parse_config(config_path, {"rounds": "9", "seed": None, "aggregation": ""})
    assert (cfg.rounds, cfg.seed, cfg.aggregation) == (9, 1, AGGREGATION.algorithm1)


def test_duplicate_keys_keep_the_last_value(base_path_for_tests: Path):
    config_path = base_path_for_tests / "duplicate.conf"
    config_path.write_text("rounds=3\nrounds = 4\n", encoding="utf-8")
    assert read_config_file(config_path) == {"rounds": "4"}


@pytest.mark.parametrize(
    ("settings", "key"),
    [
        ({"beta": "1.5"}, "beta"),
        ({"zeta": "-1"}, "zeta"),
        ({"rounds": "many"}, "rounds"),
        ({"learning_rate": "0.1"}, "learning_rate"),
        ({"algorithm": "fedprox"}, "algorithm"),
    ],
)
def test_bad_settings_name_their_key(settings: dict[str, str], key: str):
    with pytest.raises(ConfigError) as exc_info:
        parse_config(overrides=settings)
    assert exc_info.value.key == key


def test_malformed_line(base_path_for_tests: Path):
    config_path = base_path_for_tests / "malformed.conf"
    config_path.write_text("rounds 3\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config(config_path)


@pytest.mark.parametrize("line", ["rounds", "=5", "seed 1"])
def test_malformed_line_is_located(base_path_for_tests: Path, line: str):
    config_path = base_path_for_tests / "malformed_later.conf"
    config_path.write_text(f"# header\nzeta=5\n\n{line}\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="line 4 of"):
        read_config_file(config_path)


def test_config_file_comments_and_quotes(base_path_for_tests: Path):
    config_path = base_path_for_tests / "quoted.conf"
    config_path.write_text("# comment\nrounds=5  # inline\noutput_dir=\"runs/a b\"\n", encoding="utf-8")
    assert read_config_file(config_path) == {"rounds": "5", "output_dir": "runs/a b"}


def test_cross_field_checks(base_path_for_tests: Path):
    with pytest.raises(ConfigError, match="subset_size"):
        parse_config(overrides={"n_clients": "3", "subset_size": "4"})
    with pytest.raises(ConfigError, match="labels_per_client"):
        parse_config(overrides={"blob_classes": "3", "labels_per_client": "4", "subset_size": "2"})
    with pytest.raises(ConfigError, match="MNIST"):
        parse_config(overrides={"dataset": "mnist", "mnist_dir": str(base_path_for_tests / "no_mnist_here")})


def test_fed_config_carries_the_training_knobs(base_path_for_tests: Path):
    cfg = small_config(base_path_for_tests / "unused")
    fed = cfg.fed_config()
    assert type(fed) is FedConfig
    assert (fed.rounds, fed.zeta, fed.subset_size, fed.seed) == (2, 1.0, 2, 3)


def test_build_blobs_experiment(base_path_for_tests: Path):
    cfg = small_config(base_path_for_tests / "unused")
    data = build_dataset(cfg)
    assert len(data) == 4 * 2 * 15
    partition = build_partition(cfg, data)
    assert partition.n_clients == 4
    assert all(len(shard) == 20 for shard in partition.shards)
    arch = build_arch(cfg, data)
    assert arch.layer_widths == [3, 8, 4]
    assert arch.likelihood == LIKELIHOOD.categorical


def test_build_regression_experiment(base_path_for_tests: Path):
    cfg = small_config(
        base_path_for_tests / "unused",
        dataset="synth_regression",
        regression_input_dim="2",
        regression_train_per_client="12",
        regression_test_per_client="6",
    )
    data = build_dataset(cfg)
    assert len(data) == 4 * 18
    arch = build_arch(cfg, data)
    assert arch.layer_widths == [2, 8, 1]
    assert arch.likelihood == LIKELIHOOD.gaussian
    assert arch.sigma_eps == cfg.sigma_eps


def test_zero_rounds_write_a_header_only_csv(base_path_for_tests: Path):
    output_dir = base_path_for_tests / "zero_rounds"
    assert run_experiment(small_config(output_dir, rounds="0")) == 0
    paths = path_consts.get_run_output_paths(output_dir)
    assert paths["rounds"].read_text(encoding="utf-8") == ",".join(ROUNDS_CSV_COLUMNS) + "\n"
    assert paths["summary"].exists()
    assert paths["final_state"].exists()


def test_run_experiment_outputs(base_path_for_tests: Path):
    output_dir = base_path_for_tests / "pfedbayes_run"
    assert run_experiment(small_config(output_dir)) == 0
    paths = path_consts.get_run_output_paths(output_dir)

    rounds = pd.read_csv(paths["rounds"])
    assert list(rounds.columns) == ROUNDS_CSV_COLUMNS
    assert rounds["round"].tolist() == [1, 2]
    assert rounds["pm_acc"].between(0.0, 1.0).all()
    assert rounds["hellinger"].isna().all()
    assert (rounds["wall_ms"] == 0).all()

    summary = pd.read_csv(paths["summary"])
    assert summary["algorithm"].tolist() == ["pfedbayes"]
    assert 0.0 <= summary["final_pm_entropy"].iloc[0] <= np.log(4) + 1e-6
    assert 0.0 <= summary["final_gm_entropy"].iloc[0] <= np.log(4) + 1e-6
    assert summary["best_pm_acc"].iloc[0] == pytest.approx(rounds["pm_acc"].max(), abs=1e-5)

    with np.load(paths["final_state"]) as final_state:
        assert set(final_state.files) == {"mu", "rho"}


def test_fedavg_experiment_outputs(base_path_for_tests: Path):
    output_dir = base_path_for_tests / "fedavg_run"
    assert run_experiment(small_config(output_dir, algorithm=ALGORITHM.fedavg)) == 0
    paths = path_consts.get_run_output_paths(output_dir)
    rounds = pd.read_csv(paths["rounds"])
    assert rounds["pm_acc"].isna().all()
    assert rounds["gm_acc"].notna().all()
    with np.load(paths["final_state"]) as final_state:
        assert final_state.files == ["theta"]


def test_regression_experiment_records_hellinger(base_path_for_tests: Path):
    output_dir = base_path_for_tests / "regression_run"
    cfg = small_config(
        output_dir,
        dataset="synth_regression",
        regression_train_per_client="20",
        regression_test_per_client="10",
        eta1="0.001",
        eta2="0.001",
    )
    assert run_experiment(cfg) == 0
    rounds = pd.read_csv(path_consts.get_run_output_paths(output_dir)["rounds"])
    assert rounds["hellinger"].between(0.0, 1.0).all()
    assert rounds["gm_acc"].isna().all()


def test_default_regression_experiment_trains(base_path_for_tests: Path):
    output_dir = base_path_for_tests / "default_regression_run"
    cfg = parse_config(
        overrides={"dataset": "synth_regression", "rounds": "3", "k_eval": "2", "output_dir": str(output_dir)},
    )
    assert cfg.network_hidden_widths == [8]
    assert run_experiment(cfg) == 0
    rounds = pd.read_csv(path_consts.get_run_output_paths(output_dir)["rounds"])
    assert rounds["hellinger"].notna().all()
    assert rounds["hellinger"].between(0.0, 1.0).all()
    assert np.isfinite(rounds["mean_loss"]).all()


def test_hidden_widths_default_by_dataset_kind():
    assert ExperimentConfig().network_hidden_widths == [100]
    assert ExperimentConfig(dataset="synth_regression").network_hidden_widths == [8]
    assert ExperimentConfig(dataset="synth_regression", hidden_widths=[4, 4]).network_hidden_widths == [4, 4]
    assert parse_config(overrides={"hidden_widths": ","}).network_hidden_widths == []


def test_run_experiment_reports_divergence(base_path_for_tests: Path):
    cfg = small_config(
        base_path_for_tests / "diverged_run",
        algorithm=ALGORITHM.fedavg,
        dataset="synth_regression",
        regression_train_per_client="20",
        regression_test_per_client="10",
        local_steps="400",
        fedavg_lr="100",
    )
    assert run_experiment(cfg) == 3


def test_csv_output_is_identical_across_worker_counts(base_path_for_tests: Path):
    outputs = []
    for workers in ("1", "3"):
        output_dir = base_path_for_tests / f"workers_{workers}"
        assert run_experiment(small_config(output_dir, workers=workers)) == 0
        paths = path_consts.get_run_output_paths(output_dir)
        outputs.append((paths["rounds"].read_bytes(), paths["summary"].read_bytes()))
    assert outputs[0] == outputs[1]


def test_run_experiment_reports_unusable_data(base_path_for_tests: Path):
    mnist_dir = base_path_for_tests / "corrupt_mnist"
    mnist_dir.mkdir(exist_ok=True)
    images = np.zeros((20, 28, 28), dtype=np.uint8)
    labels = np.arange(20, dtype=np.uint8) % 10
    write_idx(
        images,
        labels,
        mnist_dir / path_consts.MNIST_TRAIN_IMAGES_FILENAME,
        mnist_dir / path_consts.MNIST_TRAIN_LABELS_FILENAME,
    )
    mnist_dir.joinpath(path_consts.MNIST_TEST_IMAGES_FILENAME).write_bytes(b"not an idx file")
    mnist_dir.joinpath(path_consts.MNIST_TEST_LABELS_FILENAME).write_bytes(b"not an idx file")

    cfg = small_config(base_path_for_tests / "corrupt_run", dataset="mnist", mnist_dir=str(mnist_dir))
    assert run_experiment(cfg) == 2


def test_save_dataset(base_path_for_tests: Path):
    target = save_dataset(small_config(base_path_for_tests / "generated"))
    with np.load(target) as saved:
        assert saved["features"].shape == (120, 3)
        assert saved["targets"].shape == (120,)


def test_parser_subcommands():
    args = build_parser().parse_args(["run", "--zeta", "5", "--out", "somewhere"])
    assert (args.command, args.zeta, args.output_dir) == ("run", "5", "somewhere")
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_cli_validate_config(base_path_for_tests: Path, capsys: pytest.CaptureFixture[str], restore_logging):
    config_path = write_config(base_path_for_tests / "cli.conf", SMALL_BLOBS_SETTINGS)
    assert main(["validate-config", "--config", str(config_path), "--zeta", "2.5"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["zeta"] == 2.5
    assert resolved["n_clients"] == 4


def test_cli_rejects_bad_config(restore_logging):
    assert main(["validate-config", "--beta", "1.5"]) == 2
    assert main(["run", "--config", "/nonexistent/pfedbayes.conf"]) == 1


def test_cli_run_and_gen_data(base_path_for_tests: Path, restore_logging):
    config_path = write_config(base_path_for_tests / "cli_run.conf", SMALL_BLOBS_SETTINGS)
    output_dir = base_path_for_tests / "cli_run"
    assert main(["run", "--config", str(config_path), "--out", str(output_dir), "--log-level", "WARNING"]) == 0
    paths = path_consts.get_run_output_paths(output_dir)
    assert all(paths[role].exists() for role in ("rounds", "summary", "final_state", "log"))

    generated_dir = base_path_for_tests / "cli_gen_data"
    assert main(["gen-data", "--config", str(config_path), "--out", str(generated_dir)]) == 0
    assert generated_dir.joinpath(path_consts.GENERATED_DATASET_FILENAME).exists()


@pytest.mark.benchmark
def test_blobs_smoke_run(base_path_for_tests: Path):
    output_dir = base_path_for_tests / "blobs_smoke"
    cfg = parse_config(
        overrides={
            "dataset": DATASET_NAME.blobs,
            "rounds": "20",
            "zeta": "1.0",
            "eta1": "0.01",
            "eta2": "0.01",
            "hidden_widths": "32",
            "test_per_class": "100",
            "output_dir": str(output_dir),
        },
    )
    assert run_experiment(cfg) == 0
    rounds = pd.read_csv(path_consts.get_run_output_paths(output_dir)["rounds"])
    assert rounds["pm_acc"].iloc[-1] > 0.5
