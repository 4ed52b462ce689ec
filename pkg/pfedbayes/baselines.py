"""FedAvg over a deterministic network of the same architecture, for comparison with pFedBayes."""

from __future__ import annotations

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, field_validator
from typing_extensions import override

from pfedbayes.bnn import Minibatch, NetworkArch, forward_cache, init_variational, point_nll_and_grad, softmax
from pfedbayes.data import Dataset, Partition
from pfedbayes.federation import (
    BaseFederatedRunner,
    ClientOutcome,
    FedConfig,
    FederatedResult,
    RoundRecord,
    TrainingDivergedError,
    effective_batch_size,
    iter_minibatch_indices,
)
from pfedbayes.meta_consts import DATASET_KIND, RNG_PURPOSE
from pfedbayes.metrics import accuracy, mean_predictive_entropy, point_hellinger_error
from pfedbayes.tensor import RngStream, stream_for


class PointParams(BaseModel):
    """The weights and biases of a deterministic network, flat in the same layout as the Bayesian means."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    theta: np.ndarray

    @field_validator("theta", mode="before")
    @classmethod
    def validator_finite_vector(cls, value: object) -> np.ndarray:
        array = np.array(value, dtype=np.float64)
        if array.ndim != 1:
            raise ValueError(f"Expected a flat vector, got shape {array.shape}.")
        if not np.all(np.isfinite(array)):
            raise ValueError("Weights must be finite.")
        return array

    def check_matches(self, arch: NetworkArch) -> None:
        if self.theta.shape[0] != arch.param_count:
            raise ValueError(f"Expected {arch.param_count} weights, got {self.theta.shape[0]}.")


def fedavg_client_update_with_loss(
    arch: NetworkArch,
    theta: PointParams,
    shard: list[int],
    cfg: FedConfig,
    data: Dataset,
    stream: RngStream,
    *,
    client_id: int = 0,
) -> tuple[PointParams, float]:
    """`fedavg_client_update`, also returning the mean minibatch loss (NaN when R = 0).

    Raises:
        TrainingDivergedError: A step produced a non-finite loss or non-finite weights. `client_id` only labels it.
    """
    theta.check_matches(arch)
    if cfg.local_steps == 0:
        return PointParams(theta=theta.theta), float("nan")
    if not shard:
        raise ValueError(f"An empty shard cannot take {cfg.local_steps} local steps.")

    features, targets = data.subset(shard)
    batches = iter_minibatch_indices(
        stream.spawn("batches").generator(),
        len(shard),
        effective_batch_size(cfg, len(shard)),
    )
    weights = theta.theta.copy()
    losses = []
    for step in range(cfg.local_steps):
        rows = next(batches)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = point_nll_and_grad(arch, weights, Minibatch(features=features[rows], targets=targets[rows]))
            weights = weights - cfg.fedavg_lr * grad
        if not (np.isfinite(loss) and np.all(np.isfinite(weights))):
            raise TrainingDivergedError(client_id, step, f"loss {loss} or the weights are non-finite")
        losses.append(loss)
    return PointParams(theta=weights), float(np.mean(losses))


def fedavg_client_update(
    arch: NetworkArch,
    theta: PointParams,
    shard: list[int],
    cfg: FedConfig,
    data: Dataset,
    stream: RngStream,
) -> PointParams:
    """R steps of minibatch SGD (learning rate `cfg.fedavg_lr`) on the mean negative log-likelihood.

    The minibatches are drawn exactly as pFedBayes draws them for the same client stream.
    """
    updated, _ = fedavg_client_update_with_loss(arch, theta, shard, cfg, data, stream)
    return updated


class FedAvgRunner(BaseFederatedRunner):
    """Broadcast, local SGD, plain average of the sampled clients."""

    global_theta: PointParams

    @override
    def initialize(self) -> None:
        initial = init_variational(self.arch, self.cfg.rho_init, stream_for(self.cfg.seed, RNG_PURPOSE.init))
        self.global_theta = PointParams(theta=initial.mu)

    @override
    def local_update(self, client_id: int, round_index: int) -> ClientOutcome:
        updated, loss = fedavg_client_update_with_loss(
            self.arch,
            self.global_theta,
            self.partition.shards[client_id],
            self.cfg,
            self.data,
            self.client_stream(client_id, round_index),
            client_id=client_id,
        )
        return ClientOutcome(client_id=client_id, params=updated, upload=updated, mean_loss=loss)

    @override
    def aggregate(self, round_index: int, sampled: list[ClientOutcome]) -> None:
        self.global_theta = PointParams(theta=np.mean([outcome.upload.theta for outcome in sampled], axis=0))

    @override
    def record_round(self, round_index: int, outcomes: list[ClientOutcome], wall_ms: float) -> RoundRecord:
        gm_acc = gm_entropy = None
        hellinger = None
        if self.should_evaluate(round_index):
            features, targets = self.union_eval_split()
            if self.data.kind == DATASET_KIND.classification:
                probs = softmax(forward_cache(self.arch, self.global_theta.theta, features).output)
                gm_acc = accuracy(lambda _: probs, features, targets)
                gm_entropy = mean_predictive_entropy(probs)
            elif self.data.true_fn is not None and self.arch.sigma_eps is not None:
                hellinger = point_hellinger_error(
                    self.arch,
                    self.global_theta.theta,
                    self.data.true_fn,
                    features,
                    self.arch.sigma_eps,
                )
        return RoundRecord(
            round=round_index + 1,
            gm_acc=gm_acc,
            mean_client_loss=float(np.mean([outcome.mean_loss for outcome in outcomes])),
            mean_kl=float("nan"),
            hellinger=hellinger,
            gm_entropy=gm_entropy,
            wall_ms=wall_ms,
        )

    @override
    def build_result(self) -> FederatedResult:
        logger.debug(f"FedAvg finished after {len(self.records)} rounds")
        return FederatedResult(records=self.records, final_state={"theta": self.global_theta.theta.copy()})


def fedavg_run(
    cfg: FedConfig,
    arch: NetworkArch,
    data: Dataset,
    partition: Partition,
    *,
    workers: int = 1,
) -> list[RoundRecord]:
    """Train FedAvg for `cfg.rounds` rounds and return one record per round."""
    return FedAvgRunner(cfg, arch, data, partition, workers=workers).run().records
