"""The personalized federated training loop: client updates, client subsampling and server aggregation."""

from __future__ import annotations

import time
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from typing import Any

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from typing_extensions import override

from pfedbayes.bnn import (
    Minibatch,
    NetworkArch,
    VariationalParams,
    client_objective_and_grad,
    floored_sigma,
    grad_localized_global,
    init_variational,
    inverse_softplus,
    kl_diag_gauss,
    kl_grad_wrt_q,
    kl_mean_proximal_step,
    likelihood_part_and_grad,
)
from pfedbayes.data import Dataset, Partition
from pfedbayes.meta_consts import (
    AGGREGATION,
    DATASET_KIND,
    DEFAULT_BATCH_SIZE,
    DEFAULT_ETA,
    DEFAULT_FEDAVG_LR,
    DEFAULT_RHO_INIT,
    DEFAULT_SUBSET_SIZE,
    DEFAULT_ZETA,
    KL_STEP,
    RNG_PURPOSE,
)
from pfedbayes.metrics import EvalReport, evaluate_global, evaluate_personalized, hellinger_error, mean_kl
from pfedbayes.tensor import RngStream, stream_for


class ClientState(BaseModel):
    """One client's personalized posterior and its training shard."""

    client_id: int = Field(ge=0)
    v_personal: VariationalParams
    shard: list[int]

    @field_validator("shard")
    @classmethod
    def validator_shard_indices(cls, shard: list[int]) -> list[int]:
        if any(index < 0 for index in shard):
            raise ValueError("Shard indices must be non-negative.")
        if len(set(shard)) != len(shard):
            raise ValueError("Shard indices must be distinct.")
        return shard


class ServerState(BaseModel):
    """The global prior held by the server."""

    v_global: VariationalParams
    round: int = Field(default=0, ge=0)


class FedConfig(BaseModel):
    """Every knob of a federated run."""

    model_config = ConfigDict(frozen=True)

    rounds: int = Field(default=100, ge=0)
    """T_r, the number of communication rounds."""
    local_steps: int = Field(default=20, ge=0)
    """R, the number of local iterations per round."""
    subset_size: int = Field(default=DEFAULT_SUBSET_SIZE, ge=1)
    """S, the number of clients whose uploads are aggregated each round."""
    beta: float = Field(default=1.0, gt=0.0, le=1.0)
    """The server damping factor."""
    zeta: float = Field(default=DEFAULT_ZETA, gt=0.0)
    """The weight of KL(q_i || w) in the client objective."""
    eta1: float = Field(default=DEFAULT_ETA, ge=0.0)
    """The learning rate of the personalized model."""
    eta2: float = Field(default=DEFAULT_ETA, ge=0.0)
    """The learning rate of the localized global model."""
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    mc_draws: int = Field(default=1, ge=1)
    """K, the number of weight draws per objective evaluation."""
    rho_init: float = DEFAULT_RHO_INIT
    seed: int = Field(default=0, ge=0, lt=2**64)

    aggregation: AGGREGATION = AGGREGATION.algorithm1
    kl_step: KL_STEP = KL_STEP.proximal
    """How local steps move the means under the KL pull. `gradient` is the plain SGD step."""
    k_eval: int = Field(default=10, ge=1)
    """The number of weight draws behind every BMA evaluation."""
    eval_every: int = Field(default=1, ge=1)
    """Evaluate every this many rounds, and always on the last round."""
    fedavg_lr: float = Field(default=DEFAULT_FEDAVG_LR, ge=0.0)
    """The local SGD learning rate of the FedAvg baseline."""
    record_wall_time: bool = False
    """If false, every recorded `wall_ms` is 0 so that repeated runs produce identical records."""

    @model_validator(mode="after")
    def validator_finite(self) -> FedConfig:
        if not all(np.isfinite([self.zeta, self.eta1, self.eta2, self.rho_init, self.fedavg_lr])):
            raise ValueError("Every real-valued setting must be finite.")
        return self


class RoundRecord(BaseModel):
    """The metrics of one communication round. Accuracies are None for regression and unevaluated rounds."""

    round: int = Field(ge=0)
    pm_acc: float | None = Field(default=None, ge=0.0, le=1.0)
    gm_acc: float | None = Field(default=None, ge=0.0, le=1.0)
    mean_client_loss: float
    mean_kl: float
    hellinger: float | None = Field(default=None, ge=0.0, le=1.0)
    pm_entropy: float | None = Field(default=None, ge=0.0)
    """The mean predictive entropy of the personalized models, in nats."""
    gm_entropy: float | None = Field(default=None, ge=0.0)
    wall_ms: float = 0.0


class FederatedResult(BaseModel):
    """The round history and final parameters of a run."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    records: list[RoundRecord]
    final_state: dict[str, np.ndarray]
    """The final global parameters by name, as written to the final-state dump."""
    clients: list[ClientState] = []
    server: ServerState | None = None


class ClientOutcome(BaseModel):
    """What one client task hands back to the round loop."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    client_id: int
    params: Any
    """The client's new model (personalized posterior, or point weights)."""
    upload: Any
    """What the client sends to the server."""
    mean_loss: float
    pm_acc: float | None = None
    pm_entropy: float | None = None


def iter_minibatch_indices(generator: np.random.Generator, n: int, b: int) -> Iterator[np.ndarray]:
    """Endless minibatches of `b` positions in range(n), drawn without replacement from a shuffle that is
    redrawn every time fewer than `b` positions remain."""
    order = generator.permutation(n)
    cursor = 0
    while True:
        if cursor + b > n:
            order = generator.permutation(n)
            cursor = 0
        yield order[cursor : cursor + b]
        cursor += b


def effective_batch_size(cfg: FedConfig, n: int) -> int:
    return min(cfg.batch_size, n)


class TrainingDivergedError(ArithmeticError):
    """A local step produced a non-finite loss or non-finite parameters."""

    def __init__(self, client_id: int, step: int, detail: str) -> None:
        self.client_id = client_id
        self.step = step
        super().__init__(f"client {client_id} diverged at local step {step}: {detail}")


def personal_step(
    arch: NetworkArch,
    v_personal: VariationalParams,
    v_localized: VariationalParams,
    batch: Minibatch,
    g_draws: np.ndarray,
    cfg: FedConfig,
    n: int,
) -> tuple[VariationalParams, float]:
    """One step of the personalized posterior; returns it with the objective at the pre-step parameters."""
    b = len(batch)
    if cfg.kl_step == KL_STEP.gradient:
        value, grads = client_objective_and_grad(arch, v_personal, v_localized, batch, g_draws, cfg.zeta, n, b)
        assert grads is not None
        return (
            VariationalParams(mu=v_personal.mu - cfg.eta1 * grads.d_mu, rho=v_personal.rho - cfg.eta1 * grads.d_rho),
            value,
        )

    likelihood_part, likelihood_grads = likelihood_part_and_grad(arch, v_personal, batch, g_draws, n, b)
    assert likelihood_grads is not None
    value = likelihood_part + cfg.zeta * kl_diag_gauss(v_personal, v_localized)
    kl_grads = kl_grad_wrt_q(v_personal, v_localized)
    mu = kl_mean_proximal_step(
        v_personal.mu - cfg.eta1 * likelihood_grads.d_mu,
        v_localized.mu,
        floored_sigma(v_localized.sigma) ** 2,
        cfg.eta1 * cfg.zeta,
    )
    rho = v_personal.rho - cfg.eta1 * (likelihood_grads.d_rho + cfg.zeta * kl_grads.d_rho)
    return VariationalParams(mu=mu, rho=rho), value


def localized_global_step(
    v_personal: VariationalParams,
    v_localized: VariationalParams,
    cfg: FedConfig,
) -> VariationalParams:
    """One step of the localized global model towards the personalized posterior."""
    grads = grad_localized_global(v_personal, v_localized)
    rho = v_localized.rho - cfg.eta2 * grads.d_rho
    if cfg.kl_step == KL_STEP.gradient:
        return VariationalParams(mu=v_localized.mu - cfg.eta2 * grads.d_mu, rho=rho)
    mu = kl_mean_proximal_step(v_localized.mu, v_personal.mu, floored_sigma(v_localized.sigma) ** 2, cfg.eta2)
    return VariationalParams(mu=mu, rho=rho)


def client_update_with_loss(
    arch: NetworkArch,
    client: ClientState,
    v_global: VariationalParams,
    cfg: FedConfig,
    data: Dataset,
    stream: RngStream,
) -> tuple[VariationalParams, VariationalParams, float]:
    """`client_update`, also returning the mean client objective over the local steps (NaN when R = 0)."""
    v_global.check_matches(arch)
    v_personal = client.v_personal.copy()
    v_localized = v_global.copy()
    if cfg.local_steps == 0:
        return v_personal, v_localized, float("nan")
    if not client.shard:
        raise ValueError(f"Client {client.client_id} has an empty shard but {cfg.local_steps} local steps.")

    features, targets = data.subset(client.shard)
    n = len(client.shard)
    b = effective_batch_size(cfg, n)
    batches = iter_minibatch_indices(stream.spawn("batches").generator(), n, b)
    draws = stream.spawn("draws").generator()

    losses = []
    for step in range(cfg.local_steps):
        rows = next(batches)
        batch = Minibatch(features=features[rows], targets=targets[rows])
        g = draws.standard_normal((cfg.mc_draws, v_personal.size))
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                v_personal, value = personal_step(arch, v_personal, v_localized, batch, g, cfg, n)
                v_localized = localized_global_step(v_personal, v_localized, cfg)
        except ValidationError as e:
            raise TrainingDivergedError(client.client_id, step, "non-finite parameters or gradients") from e
        if not np.isfinite(value):
            raise TrainingDivergedError(client.client_id, step, f"the objective is {value}")
        losses.append(value)
    return v_personal, v_localized, float(np.mean(losses))


def client_update(
    arch: NetworkArch,
    client: ClientState,
    v_global: VariationalParams,
    cfg: FedConfig,
    data: Dataset,
    stream: RngStream,
) -> tuple[VariationalParams, VariationalParams]:
    """Run R alternating local steps on one client.

    Each step takes one seeded minibatch and `mc_draws` weight draws, moves the personalized posterior down the
    client objective (learning rate `eta1`), then moves the localized global model down KL(q_i || w) (learning rate
    `eta2`). The localized global model starts from `v_global`. With `cfg.kl_step` proximal the quadratic mean part
    of the KL term takes an exact proximal step, which stays stable for any zeta; every other part takes a gradient
    step.

    Returns:
        tuple[VariationalParams, VariationalParams]: The new personalized posterior and the localized global model.

    Raises:
        ValueError: The shard is empty and R > 0.
        TrainingDivergedError: A step produced a non-finite objective or non-finite parameters.
    """
    v_personal, v_localized, _ = client_update_with_loss(arch, client, v_global, cfg, data, stream)
    return v_personal, v_localized


def server_aggregate(v_t: VariationalParams, uploads: list[VariationalParams], beta: float) -> VariationalParams:
    """(1 - beta) * v_t + beta * mean(uploads), on mu and on rho alike. Uploads are summed in the order given."""
    if not uploads:
        raise ValueError("Cannot aggregate an empty list of uploads.")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}.")
    if any(upload.size != v_t.size for upload in uploads):
        raise ValueError("Every upload must have the length of the global model.")
    mean_mu = np.mean([upload.mu for upload in uploads], axis=0)
    mean_rho = np.mean([upload.rho for upload in uploads], axis=0)
    return VariationalParams(
        mu=(1.0 - beta) * v_t.mu + beta * mean_mu,
        rho=(1.0 - beta) * v_t.rho + beta * mean_rho,
    )


def optimal_global_aggregate(clients: list[VariationalParams]) -> VariationalParams:
    """The global Gaussian minimizing the average KL(q_i || w) over `clients`, in closed form.

    mu_w = mean(mu_i)
    sigma_w^2 = mean(sigma_i^2 + (mu_i - mu_w)^2)
    """
    if not clients:
        raise ValueError("Cannot aggregate an empty list of clients.")
    if any(client.size != clients[0].size for client in clients):
        raise ValueError("Every client must have the same number of parameters.")
    mus = np.stack([client.mu for client in clients])
    sigmas = np.stack([client.sigma for client in clients])
    mu_w = mus.mean(axis=0)
    var_w = np.mean(sigmas**2 + (mus - mu_w) ** 2, axis=0)
    return VariationalParams(mu=mu_w, rho=inverse_softplus(np.sqrt(var_w)))


class BaseFederatedRunner:
    """The round loop every federated algorithm shares.
    See run() for the order of operations; subclasses fill in the algorithm-specific steps."""

    cfg: FedConfig
    arch: NetworkArch
    data: Dataset
    partition: Partition
    workers: int
    """The number of threads running client tasks. Never changes the results."""

    records: list[RoundRecord]
    eval_shards: list[list[int]]
    """The indices each client is evaluated on."""

    def __init__(
        self,
        cfg: FedConfig,
        arch: NetworkArch,
        data: Dataset,
        partition: Partition,
        *,
        workers: int = 1,
    ):
        if workers < 1:
            raise ValueError(f"workers must be at least 1, got {workers}.")
        self.cfg = cfg
        self.arch = arch
        self.data = data
        self.partition = partition
        self.workers = workers
        self.records = []
        self.eval_shards = partition.test_shards or partition.shards

    @property
    def n_clients(self) -> int:
        return self.partition.n_clients

    def run(self) -> FederatedResult:
        """Run every round and return the history.

        Per round: every client updates (concurrently, results ordered by client id), a seeded subset of clients
        is sampled, their uploads are aggregated, and the round is evaluated and recorded.
        """
        self.check_setup()
        self.initialize()
        for round_index in range(self.cfg.rounds):
            started = time.perf_counter()
            outcomes = self.update_all_clients(round_index)
            sampled = self.sample_subset(round_index)
            self.aggregate(round_index, [outcomes[client_id] for client_id in sampled])
            self.accept_client_models(outcomes)
            wall_ms = (time.perf_counter() - started) * 1000.0 if self.cfg.record_wall_time else 0.0
            record = self.record_round(round_index, outcomes, wall_ms)
            self.records.append(record)
            logger.info(
                f"Round {round_index + 1}/{self.cfg.rounds}: pm_acc={record.pm_acc} gm_acc={record.gm_acc} "
                f"loss={record.mean_client_loss:.6g} kl={record.mean_kl:.6g}",
            )
        return self.build_result()

    def check_setup(self) -> None:
        """Reject an impossible setup before any training."""
        if self.n_clients < 1:
            raise ValueError("The partition holds no clients.")
        if self.cfg.subset_size > self.n_clients:
            raise ValueError(f"subset_size {self.cfg.subset_size} exceeds the {self.n_clients} clients.")
        if self.arch.n_inputs != self.data.input_dim:
            raise ValueError(f"The network takes {self.arch.n_inputs} inputs but the data has {self.data.input_dim}.")
        if self.cfg.local_steps > 0 and any(not shard for shard in self.partition.shards):
            raise ValueError("Every client needs a nonempty shard when local_steps > 0.")
        if not self.partition.test_shards:
            logger.warning("The partition has no test shards; clients are evaluated on their training shards.")

    def should_evaluate(self, round_index: int) -> bool:
        return (round_index + 1) % self.cfg.eval_every == 0 or round_index == self.cfg.rounds - 1

    def client_stream(self, client_id: int, round_index: int) -> RngStream:
        return stream_for(self.cfg.seed, RNG_PURPOSE.client, client_id, round_index)

    def update_all_clients(self, round_index: int) -> list[ClientOutcome]:
        """Run `local_update` for every client; the returned list is indexed by client id."""
        def task(client_id: int) -> ClientOutcome:
            return self.local_update(client_id, round_index)

        client_ids = range(self.n_clients)
        if self.workers == 1:
            return [task(client_id) for client_id in client_ids]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(task, client_ids))

    def sample_subset(self, round_index: int) -> list[int]:
        """S distinct client ids drawn uniformly for this round, in ascending order."""
        generator = stream_for(self.cfg.seed, RNG_PURPOSE.subset, round_index).generator()
        chosen = generator.choice(self.n_clients, size=self.cfg.subset_size, replace=False)
        return sorted(int(client_id) for client_id in chosen)

    def eval_split(self, client_id: int) -> tuple[np.ndarray, np.ndarray]:
        return self.data.subset(self.eval_shards[client_id])

    def union_eval_split(self) -> tuple[np.ndarray, np.ndarray]:
        if self.partition.test_shards:
            return self.data.subset(self.partition.union_test_indices)
        return self.data.subset([index for shard in self.partition.shards for index in shard])

    def initialize(self) -> None:
        raise NotImplementedError

    def local_update(self, client_id: int, round_index: int) -> ClientOutcome:
        raise NotImplementedError

    def aggregate(self, round_index: int, sampled: list[ClientOutcome]) -> None:
        raise NotImplementedError

    def accept_client_models(self, outcomes: list[ClientOutcome]) -> None:
        """Keep whatever client-side state persists into the next round."""

    def record_round(self, round_index: int, outcomes: list[ClientOutcome], wall_ms: float) -> RoundRecord:
        raise NotImplementedError

    def build_result(self) -> FederatedResult:
        raise NotImplementedError


class PFedBayesRunner(BaseFederatedRunner):
    """Personalized federated learning of mean-field Gaussian networks.

    Every client keeps its personalized posterior across rounds; the server keeps the global prior.
    """

    server: ServerState
    clients: list[ClientState]

    @override
    def check_setup(self) -> None:
        super().check_setup()
        if self.cfg.zeta < 1.0:
            logger.warning(f"zeta={self.cfg.zeta} is below 1, outside the range the convergence theory covers.")
        if self.data.kind == DATASET_KIND.regression and self.data.true_fn is None:
            logger.warning("The regression data has no true function; the Hellinger error will not be recorded.")

    @override
    def initialize(self) -> None:
        v_initial = init_variational(self.arch, self.cfg.rho_init, stream_for(self.cfg.seed, RNG_PURPOSE.init))
        self.server = ServerState(v_global=v_initial, round=0)
        self.clients = [
            ClientState(client_id=client_id, v_personal=v_initial.copy(), shard=shard)
            for client_id, shard in enumerate(self.partition.shards)
        ]
        logger.debug(f"Initialized {self.n_clients} clients with {v_initial.size} parameters each")

    @override
    def local_update(self, client_id: int, round_index: int) -> ClientOutcome:
        v_personal, v_localized, loss = client_update_with_loss(
            self.arch,
            self.clients[client_id],
            self.server.v_global,
            self.cfg,
            self.data,
            self.client_stream(client_id, round_index),
        )
        pm_acc = pm_entropy = None
        if self.data.kind == DATASET_KIND.classification and self.should_evaluate(round_index):
            features, labels = self.eval_split(client_id)
            stream = stream_for(self.cfg.seed, RNG_PURPOSE.evaluate, "personal", client_id, round_index)
            k_eval = self.cfg.k_eval
            pm_acc, pm_entropy = evaluate_personalized(self.arch, v_personal, features, labels, k_eval, stream)
        return ClientOutcome(
            client_id=client_id,
            params=v_personal,
            upload=v_localized,
            mean_loss=loss,
            pm_acc=pm_acc,
            pm_entropy=pm_entropy,
        )

    @override
    def aggregate(self, round_index: int, sampled: list[ClientOutcome]) -> None:
        uploads = [outcome.upload for outcome in sampled]
        if self.cfg.aggregation == AGGREGATION.optimal:
            v_global = optimal_global_aggregate(uploads)
        else:
            v_global = server_aggregate(self.server.v_global, uploads, self.cfg.beta)
        self.server = ServerState(v_global=v_global, round=round_index + 1)

    @override
    def accept_client_models(self, outcomes: list[ClientOutcome]) -> None:
        for outcome in outcomes:
            self.clients[outcome.client_id].v_personal = outcome.params

    def evaluate(self, round_index: int, outcomes: list[ClientOutcome]) -> EvalReport:
        """PM accuracy per client, GM accuracy on the union of the evaluation shards, or the Hellinger error."""
        kl = mean_kl([client.v_personal for client in self.clients], self.server.v_global)
        if not self.should_evaluate(round_index):
            return EvalReport(mean_kl=kl)
        if self.data.kind == DATASET_KIND.regression:
            return EvalReport(mean_kl=kl, hellinger=self.mean_hellinger(round_index))

        features, labels = self.union_eval_split()
        stream = stream_for(self.cfg.seed, RNG_PURPOSE.evaluate, "global", round_index)
        gm_acc, entropy = evaluate_global(self.arch, self.server.v_global, features, labels, self.cfg.k_eval, stream)
        return EvalReport(
            per_client_pm_acc=[float(outcome.pm_acc) for outcome in outcomes if outcome.pm_acc is not None],
            gm_acc=gm_acc,
            mean_kl=kl,
            per_client_pm_entropy=[
                float(outcome.pm_entropy) for outcome in outcomes if outcome.pm_entropy is not None
            ],
            mean_entropy=entropy,
        )

    def mean_hellinger(self, round_index: int) -> float | None:
        """The Hellinger error of every personalized posterior on its client's evaluation inputs, averaged."""
        if self.data.true_fn is None or self.arch.sigma_eps is None:
            return None
        errors = []
        for client in self.clients:
            features, _ = self.eval_split(client.client_id)
            stream = stream_for(self.cfg.seed, RNG_PURPOSE.evaluate, "hellinger", client.client_id, round_index)
            errors.append(
                hellinger_error(
                    self.arch,
                    client.v_personal,
                    self.data.true_fn,
                    features,
                    self.arch.sigma_eps,
                    self.cfg.k_eval,
                    stream,
                ),
            )
        return float(np.mean(errors))

    @override
    def record_round(self, round_index: int, outcomes: list[ClientOutcome], wall_ms: float) -> RoundRecord:
        report = self.evaluate(round_index, outcomes)
        return RoundRecord(
            round=round_index + 1,
            pm_acc=report.pm_acc,
            gm_acc=report.gm_acc,
            mean_client_loss=float(np.mean([outcome.mean_loss for outcome in outcomes])),
            mean_kl=report.mean_kl,
            hellinger=report.hellinger,
            pm_entropy=report.pm_entropy,
            gm_entropy=report.mean_entropy,
            wall_ms=wall_ms,
        )

    @override
    def build_result(self) -> FederatedResult:
        v_global = self.server.v_global
        return FederatedResult(
            records=self.records,
            final_state={"mu": v_global.mu.copy(), "rho": v_global.rho.copy()},
            clients=self.clients,
            server=self.server,
        )


def run(
    cfg: FedConfig,
    arch: NetworkArch,
    data: Dataset,
    partition: Partition,
    *,
    workers: int = 1,
) -> list[RoundRecord]:
    """Train pFedBayes for `cfg.rounds` rounds and return one record per round."""
    return PFedBayesRunner(cfg, arch, data, partition, workers=workers).run().records
