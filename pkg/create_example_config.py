import json

from pfedbayes import ALGORITHM, DATASET_NAME, SPLIT_TIER
from pfedbayes.experiment import ExperimentConfig

EXPERIMENT_EXAMPLE_CONFIG_FILENAME = "experiment.example.conf"
EXPERIMENT_SCHEMA_JSON_FILENAME = "experiment.schema.json"


def to_config_lines(config: ExperimentConfig) -> list[str]:
    """Render a config as flat key=value lines, skipping unset optional keys."""
    lines = []
    for key, value in config.model_dump(mode="json").items():
        if value is None:
            continue
        if isinstance(value, list):
            value = ",".join(str(item) for item in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key}={value}")
    return lines


def main():
    # The label-skew blobs benchmark: 10 clients, 5 of 10 labels each, 50 training samples per label
    example_config = ExperimentConfig(
        algorithm=ALGORITHM.pfedbayes,
        dataset=DATASET_NAME.blobs,
        tier=SPLIT_TIER.small,
        test_per_class=100,
        rounds=100,
        output_dir="runs/blobs_example",
    )

    with open(EXPERIMENT_EXAMPLE_CONFIG_FILENAME, "w", encoding="utf-8") as example_file:
        example_file.write("# pfedbayes experiment configuration, flat key=value lines\n")
        example_file.write("\n".join(to_config_lines(example_config)) + "\n")

    with open(EXPERIMENT_SCHEMA_JSON_FILENAME, "w", encoding="utf-8") as schema_file:
        schema_file.write(json.dumps(ExperimentConfig.model_json_schema(), indent=4) + "\n")


if __name__ == "__main__":
    main()
