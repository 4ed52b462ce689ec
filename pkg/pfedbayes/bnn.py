"""The mean-field Gaussian Bayesian neural network: parameterization, sampling, likelihoods, KL and gradients.

Every weight and bias of a fully-connected network is an independent Gaussian with mean `mu` and standard deviation
`softplus(rho)`. Parameters are stored flat, layer after layer, each layer as its row-major weight matrix
(shape `[s_out, s_in]`) followed by its bias vector.
"""

from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from pfedbayes.meta_consts import ACTIVATION, LIKELIHOOD
from pfedbayes.tensor import RngStream

SIGMA_SQUARED_FLOOR = 1e-12
"""The lower clamp applied to every variance inside KL ratios."""

_SOFTPLUS_LINEAR_ABOVE = 30.0
_SOFTPLUS_EXP_BELOW = -30.0


class NetworkArch(BaseModel):
    """The deterministic skeleton shared by the Bayesian network and the FedAvg point network."""

    model_config = ConfigDict(frozen=True)

    layer_widths: list[int]
    """The widths (s_0, s_1, ..., s_{L+1}); the first is the input size, the last the output size."""
    activation: ACTIVATION = ACTIVATION.relu
    """The activation applied on every hidden layer. The final layer is linear."""
    likelihood: LIKELIHOOD = LIKELIHOOD.categorical
    sigma_eps: float | None = None
    """The observation noise standard deviation of the gaussian likelihood."""

    @model_validator(mode="after")
    def validator_widths_and_noise(self) -> NetworkArch:
        if len(self.layer_widths) < 2:
            raise ValueError("A network needs at least an input and an output width.")
        if any(width < 1 for width in self.layer_widths):
            raise ValueError(f"All layer widths must be at least 1, got {self.layer_widths}.")
        if self.likelihood == LIKELIHOOD.gaussian and (self.sigma_eps is None or self.sigma_eps <= 0):
            raise ValueError("A gaussian likelihood needs a positive sigma_eps.")
        return self

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_widths[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """The (s_out, s_in) shape of every weight matrix."""
        return list(zip(self.layer_widths[1:], self.layer_widths[:-1], strict=True))

    @property
    def param_count(self) -> int:
        """T, the total number of weights and biases."""
        return sum(s_out * s_in + s_out for s_out, s_in in self.layer_shapes)


def _as_float_vector(value: object) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim != 1:
        raise ValueError(f"Expected a 1-dimensional vector, got shape {array.shape}.")
    if not np.all(np.isfinite(array)):
        raise ValueError("Parameter vectors must be finite.")
    return array


class VariationalParams(BaseModel):
    """The flat (mu, rho) pair defining a factorized Gaussian over all weights and biases."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    mu: np.ndarray
    rho: np.ndarray

    @field_validator("mu", "rho", mode="before")
    @classmethod
    def validator_finite_vector(cls, value: object) -> np.ndarray:
        return _as_float_vector(value)

    @model_validator(mode="after")
    def validator_equal_lengths(self) -> VariationalParams:
        if self.mu.shape != self.rho.shape:
            raise ValueError(f"mu and rho lengths differ: {self.mu.shape[0]} != {self.rho.shape[0]}.")
        return self

    @property
    def size(self) -> int:
        return int(self.mu.shape[0])

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    def copy(self) -> VariationalParams:
        return VariationalParams(mu=self.mu.copy(), rho=self.rho.copy())

    def check_matches(self, arch: NetworkArch) -> None:
        """Raise if the parameter count does not match the architecture."""
        if self.size != arch.param_count:
            raise ValueError(f"Expected {arch.param_count} parameters for {arch.layer_widths}, got {self.size}.")


class SampledWeights(BaseModel):
    """One draw theta of every weight and bias."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    theta: np.ndarray

    @field_validator("theta", mode="before")
    @classmethod
    def validator_finite_vector(cls, value: object) -> np.ndarray:
        return _as_float_vector(value)


class Gradients(BaseModel):
    """A gradient with respect to a (mu, rho) pair."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    d_mu: np.ndarray
    d_rho: np.ndarray

    @field_validator("d_mu", "d_rho", mode="before")
    @classmethod
    def validator_finite_vector(cls, value: object) -> np.ndarray:
        return _as_float_vector(value)


class Minibatch(BaseModel):
    """A batch of inputs (one per row) and their targets."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    """Shape (b, s_0)."""
    targets: np.ndarray
    """Class indices, shape (b,), or regression targets, shape (b, s_{L+1})."""

    @field_validator("features", mode="before")
    @classmethod
    def validator_features_2d(cls, value: object) -> np.ndarray:
        array = np.asarray(value, dtype=np.float64)
        if array.ndim == 1:
            array = array.reshape(1, -1)
        if array.ndim != 2:
            raise ValueError(f"Minibatch features must be 2-dimensional, got shape {array.shape}.")
        return array

    @model_validator(mode="after")
    def validator_row_counts(self) -> Minibatch:
        if self.targets.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"Minibatch has {self.features.shape[0]} feature rows but {self.targets.shape[0]} targets.",
            )
        return self

    @classmethod
    def from_pairs(cls, pairs: list[tuple[np.ndarray, object]]) -> Minibatch:
        """Build a minibatch from a list of (x, y) pairs."""
        if not pairs:
            return cls(features=np.zeros((0, 0)), targets=np.zeros(0, dtype=np.int64))
        features = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs])
        targets = np.asarray([y for _, y in pairs])
        return cls(features=features, targets=targets)

    def __len__(self) -> int:
        return int(self.features.shape[0])


def softplus(rho: float | np.ndarray) -> float | np.ndarray:
    """sigma = log(1 + exp(rho)), overflow-safe: rho itself above 30 and exp(rho) below -30."""
    given = np.asarray(rho, dtype=np.float64)
    values = np.atleast_1d(given)
    result = np.empty_like(values)
    high = values > _SOFTPLUS_LINEAR_ABOVE
    low = values < _SOFTPLUS_EXP_BELOW
    middle = ~(high | low)
    result[high] = values[high]
    result[low] = np.exp(values[low])
    result[middle] = np.log1p(np.exp(values[middle]))
    if given.ndim == 0:
        return float(result[0])
    return result


def inverse_softplus(sigma: float | np.ndarray) -> float | np.ndarray:
    """The rho with softplus(rho) == sigma, for sigma > 0."""
    values = np.asarray(sigma, dtype=np.float64)
    if np.any(values <= 0):
        raise ValueError("inverse_softplus is only defined for positive sigma.")
    result = np.where(values > _SOFTPLUS_LINEAR_ABOVE, values, np.log(np.expm1(np.minimum(values, 700.0))))
    if result.ndim == 0:
        return float(result)
    return result


def sigmoid(x: np.ndarray) -> np.ndarray:
    """The derivative of softplus."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-softmax along the last axis, computed after subtracting the row maximum."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def sample_weights(v: VariationalParams, g: np.ndarray) -> SampledWeights:
    """Reparameterize: theta_m = mu_m + softplus(rho_m) * g_m."""
    noise = np.asarray(g, dtype=np.float64)
    if noise.shape != v.mu.shape:
        raise ValueError(f"Noise length {noise.shape} does not match parameter length {v.mu.shape}.")
    return SampledWeights(theta=v.mu + v.sigma * noise)


def unflatten(arch: NetworkArch, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into per-layer (weight, bias) views."""
    if theta.shape[0] != arch.param_count:
        raise ValueError(f"Expected {arch.param_count} parameters for {arch.layer_widths}, got {theta.shape[0]}.")
    layers = []
    offset = 0
    for s_out, s_in in arch.layer_shapes:
        weight = theta[offset : offset + s_out * s_in].reshape(s_out, s_in)
        offset += s_out * s_in
        bias = theta[offset : offset + s_out]
        offset += s_out
        layers.append((weight, bias))
    return layers


def flatten(layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """The inverse of `unflatten`."""
    return np.concatenate([part for weight, bias in layers for part in (weight.ravel(), bias.ravel())])


class ForwardCache(BaseModel):
    """Everything backpropagation needs from a batched forward pass."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    inputs: list[np.ndarray]
    """The input of every layer; `inputs[0]` is the batch itself."""
    preactivations: list[np.ndarray]
    """The affine output of every layer; the last one is the network output."""

    @property
    def output(self) -> np.ndarray:
        return self.preactivations[-1]


def forward_cache(arch: NetworkArch, theta: np.ndarray, features: np.ndarray) -> ForwardCache:
    """Batched forward pass keeping every intermediate value.

    Args:
        arch (NetworkArch): The network skeleton.
        theta (np.ndarray): Flat weights and biases.
        features (np.ndarray): Inputs, shape (batch, s_0).

    Returns:
        ForwardCache: The layer inputs and preactivations.
    """
    if features.ndim != 2 or features.shape[1] != arch.n_inputs:
        raise ValueError(f"Expected inputs of width {arch.n_inputs}, got shape {features.shape}.")
    layers = unflatten(arch, theta)
    inputs = [features]
    preactivations = []
    activation = features
    for index, (weight, bias) in enumerate(layers):
        preactivation = activation @ weight.T + bias
        preactivations.append(preactivation)
        if index < len(layers) - 1:
            activation = np.maximum(preactivation, 0.0)
            inputs.append(activation)
    return ForwardCache(inputs=inputs, preactivations=preactivations)


def forward(arch: NetworkArch, w: SampledWeights, x: np.ndarray) -> np.ndarray:
    """f_theta(x): raw logits (categorical) or the raw mean (gaussian).

    Accepts a single input vector, returning a vector, or a batch matrix, returning one row per input.
    """
    inputs = np.asarray(x, dtype=np.float64)
    if inputs.ndim == 1:
        if inputs.shape[0] != arch.n_inputs:
            raise ValueError(f"Expected an input of length {arch.n_inputs}, got {inputs.shape[0]}.")
        return forward_cache(arch, w.theta, inputs.reshape(1, -1)).output[0]
    return forward_cache(arch, w.theta, inputs).output


def _check_targets(arch: NetworkArch, targets: np.ndarray, batch_size: int) -> np.ndarray:
    if arch.likelihood == LIKELIHOOD.categorical:
        labels = np.asarray(targets)
        if labels.shape != (batch_size,):
            raise ValueError(f"Expected {batch_size} class indices, got shape {labels.shape}.")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValueError("Class indices must be integers.")
            labels = labels.astype(np.int64)
        if np.any(labels < 0) or np.any(labels >= arch.n_outputs):
            raise ValueError(f"Class index out of range [0, {arch.n_outputs}).")
        return labels
    values = np.asarray(targets, dtype=np.float64).reshape(batch_size, -1)
    if values.shape[1] != arch.n_outputs:
        raise ValueError(f"Expected regression targets of width {arch.n_outputs}, got {values.shape[1]}.")
    return values


def log_likelihood_batch(arch: NetworkArch, output: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """The per-sample log-likelihood of `targets` given the network `output` rows."""
    checked = _check_targets(arch, targets, output.shape[0])
    if arch.likelihood == LIKELIHOOD.categorical:
        return log_softmax(output)[np.arange(output.shape[0]), checked]
    sigma_sq = arch.sigma_eps**2
    residual = checked - output
    return -np.sum(residual**2 / (2.0 * sigma_sq) + 0.5 * math.log(2.0 * math.pi * sigma_sq), axis=1)


def _nll_output_grad(arch: NetworkArch, output: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(-log p)/d(output) for every row."""
    checked = _check_targets(arch, targets, output.shape[0])
    if arch.likelihood == LIKELIHOOD.categorical:
        grad = softmax(output)
        grad[np.arange(output.shape[0]), checked] -= 1.0
        return grad
    return (output - checked) / arch.sigma_eps**2


def log_likelihood(arch: NetworkArch, w: SampledWeights, x: np.ndarray, y: object) -> float:
    """log p(y | x, theta) for a single example."""
    output = forward(arch, w, x).reshape(1, -1)
    targets = np.asarray([y]) if arch.likelihood == LIKELIHOOD.categorical else np.asarray(y).reshape(1, -1)
    return float(log_likelihood_batch(arch, output, targets)[0])


def backpropagate(arch: NetworkArch, theta: np.ndarray, cache: ForwardCache, d_output: np.ndarray) -> np.ndarray:
    """Chain `d_output` (one row per batch element) back to a flat gradient over theta, summed over the batch."""
    layers = unflatten(arch, theta)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    delta = d_output
    for index in range(len(layers) - 1, -1, -1):
        weight, _ = layers[index]
        grads[index] = (delta.T @ cache.inputs[index], delta.sum(axis=0))
        if index > 0:
            delta = (delta @ weight) * (cache.preactivations[index - 1] > 0.0)
    return flatten(grads)


def point_nll_and_grad(arch: NetworkArch, theta: np.ndarray, batch: Minibatch) -> tuple[float, np.ndarray]:
    """The mean negative log-likelihood of a batch under point weights, and its gradient."""
    if len(batch) == 0:
        raise ValueError("Cannot evaluate an empty minibatch.")
    cache = forward_cache(arch, theta, batch.features)
    nll = -float(np.mean(log_likelihood_batch(arch, cache.output, batch.targets)))
    d_output = _nll_output_grad(arch, cache.output, batch.targets) / len(batch)
    return nll, backpropagate(arch, theta, cache, d_output)


def _check_same_length(q: VariationalParams, w: VariationalParams) -> None:
    if q.size != w.size:
        raise ValueError(f"Parameter lengths differ: {q.size} != {w.size}.")


def kl_diag_gauss(q: VariationalParams, w: VariationalParams) -> float:
    """KL(q || w) between two factorized Gaussians, in closed form."""
    _check_same_length(q, w)
    var_q = np.maximum(q.sigma**2, SIGMA_SQUARED_FLOOR)
    var_w = np.maximum(w.sigma**2, SIGMA_SQUARED_FLOOR)
    terms = np.log(var_w) - np.log(var_q) + (var_q + (q.mu - w.mu) ** 2) / var_w - 1.0
    return max(0.5 * float(np.sum(terms)), 0.0)


def floored_sigma(sigma: np.ndarray) -> np.ndarray:
    """sigma with its square clamped at `SIGMA_SQUARED_FLOOR`, as every KL term sees it."""
    return np.sqrt(np.maximum(np.asarray(sigma, dtype=np.float64) ** 2, SIGMA_SQUARED_FLOOR))


def kl_grad_wrt_q(q: VariationalParams, w: VariationalParams) -> Gradients:
    """The gradient of KL(q || w) with respect to q's (mu, rho), holding w constant."""
    _check_same_length(q, w)
    sigma_q = floored_sigma(q.sigma)
    var_w = floored_sigma(w.sigma) ** 2
    d_sigma = sigma_q / var_w - 1.0 / sigma_q
    return Gradients(d_mu=(q.mu - w.mu) / var_w, d_rho=d_sigma * sigmoid(q.rho))


def grad_localized_global(v_i: VariationalParams, v_w: VariationalParams) -> Gradients:
    """The gradient of KL(q_i || w) with respect to the global (mu_w, rho_w), holding q_i constant."""
    _check_same_length(v_i, v_w)
    sigma_w = floored_sigma(v_w.sigma)
    var_w = sigma_w**2
    diff = v_i.mu - v_w.mu
    d_mu = -diff / var_w
    d_sigma = 1.0 / sigma_w - (floored_sigma(v_i.sigma) ** 2 + diff**2) / (var_w * sigma_w)
    return Gradients(d_mu=d_mu, d_rho=d_sigma * sigmoid(v_w.rho))


def kl_mean_proximal_step(
    mu: np.ndarray,
    anchor_mu: np.ndarray,
    anchor_var: np.ndarray,
    step: float,
) -> np.ndarray:
    """The exact proximal step of `step` * sum((m - anchor_mu)^2 / (2 * anchor_var)) starting from `mu`.

    This is the mean part of a KL divergence between factorized Gaussians with the variances held fixed. Unlike a
    gradient step it contracts towards `anchor_mu` for any step size.
    """
    if step < 0:
        raise ValueError(f"The step size must be non-negative, got {step}.")
    pull = step / np.maximum(anchor_var, SIGMA_SQUARED_FLOOR)
    return (mu + pull * anchor_mu) / (1.0 + pull)


def _check_likelihood_inputs(batch: Minibatch, g_draws: np.ndarray, n: int, b: int, size: int) -> None:
    if len(batch) == 0:
        raise ValueError("The client objective needs a nonempty minibatch.")
    if b != len(batch):
        raise ValueError(f"Minibatch size b={b} does not match the {len(batch)} examples given.")
    if b > n:
        raise ValueError(f"Minibatch size b={b} exceeds the shard size n={n}.")
    if g_draws.ndim != 2 or g_draws.shape[0] < 1 or g_draws.shape[1] != size:
        raise ValueError(f"Expected K >= 1 noise draws of length {size}, got shape {g_draws.shape}.")


def likelihood_part_and_grad(
    arch: NetworkArch,
    v_i: VariationalParams,
    batch: Minibatch,
    g_draws: np.ndarray,
    n: int,
    b: int,
    *,
    with_grad: bool = True,
) -> tuple[float, Gradients | None]:
    """-(n/b)(1/K) sum_j sum_k log p(y_j | x_j, mu + sigma * g_k) and, optionally, its exact gradient."""
    draws = np.atleast_2d(np.asarray(g_draws, dtype=np.float64))
    _check_likelihood_inputs(batch, draws, n, b, v_i.size)
    v_i.check_matches(arch)
    sigma = v_i.sigma
    scale = n / (b * draws.shape[0])

    value = 0.0
    d_mu = np.zeros_like(v_i.mu)
    d_rho = np.zeros_like(v_i.rho)
    rho_chain = sigmoid(v_i.rho)
    for g in draws:
        theta = v_i.mu + sigma * g
        cache = forward_cache(arch, theta, batch.features)
        value -= scale * float(np.sum(log_likelihood_batch(arch, cache.output, batch.targets)))
        if with_grad:
            d_theta = backpropagate(arch, theta, cache, scale * _nll_output_grad(arch, cache.output, batch.targets))
            d_mu += d_theta
            d_rho += d_theta * g * rho_chain
    if not with_grad:
        return value, None
    return value, Gradients(d_mu=d_mu, d_rho=d_rho)


def client_objective_and_grad(
    arch: NetworkArch,
    v_i: VariationalParams,
    v_w: VariationalParams,
    batch: Minibatch,
    g_draws: np.ndarray,
    zeta: float,
    n: int,
    b: int,
    *,
    with_grad: bool = True,
) -> tuple[float, Gradients | None]:
    """The minibatch Monte Carlo client objective and, optionally, its exact gradient.

    value = -(n/b)(1/K) sum_j sum_k log p(y_j | x_j, mu + sigma * g_k) + zeta * KL(q_i || w)

    The global parameters `v_w` are constants here.
    """
    if zeta <= 0:
        raise ValueError(f"zeta must be positive, got {zeta}.")
    likelihood_part, likelihood_grads = likelihood_part_and_grad(arch, v_i, batch, g_draws, n, b, with_grad=with_grad)
    value = likelihood_part + zeta * kl_diag_gauss(v_i, v_w)
    if likelihood_grads is None:
        return value, None
    kl_grad = kl_grad_wrt_q(v_i, v_w)
    return value, Gradients(
        d_mu=likelihood_grads.d_mu + zeta * kl_grad.d_mu,
        d_rho=likelihood_grads.d_rho + zeta * kl_grad.d_rho,
    )


def client_objective(
    arch: NetworkArch,
    v_i: VariationalParams,
    v_w: VariationalParams,
    batch: Minibatch,
    g_draws: np.ndarray,
    zeta: float,
    n: int,
    b: int,
) -> float:
    value, _ = client_objective_and_grad(arch, v_i, v_w, batch, g_draws, zeta, n, b, with_grad=False)
    return value


def grad_client_objective(
    arch: NetworkArch,
    v_i: VariationalParams,
    v_w: VariationalParams,
    batch: Minibatch,
    g_draws: np.ndarray,
    zeta: float,
    n: int,
    b: int,
) -> Gradients:
    _, gradients = client_objective_and_grad(arch, v_i, v_w, batch, g_draws, zeta, n, b)
    assert gradients is not None
    return gradients


def predict_bma(
    arch: NetworkArch,
    v: VariationalParams,
    x: np.ndarray,
    k_eval: int,
    stream: RngStream,
) -> np.ndarray:
    """Bayesian model averaging over `k_eval` weight draws.

    Returns averaged softmax probabilities (categorical) or averaged mean outputs (gaussian), for a single input
    vector or one row per input of a batch.
    """
    if k_eval < 1:
        raise ValueError(f"k_eval must be at least 1, got {k_eval}.")
    inputs = np.asarray(x, dtype=np.float64)
    single = inputs.ndim == 1
    batch = inputs.reshape(1, -1) if single else inputs
    draws = stream.generator().standard_normal((k_eval, v.size))
    sigma = v.sigma
    total = np.zeros((batch.shape[0], arch.n_outputs))
    for g in draws:
        output = forward_cache(arch, v.mu + sigma * g, batch).output
        total += softmax(output) if arch.likelihood == LIKELIHOOD.categorical else output
    averaged = total / k_eval
    return averaged[0] if single else averaged


def init_variational(arch: NetworkArch, rho_init: float, stream: RngStream) -> VariationalParams:
    """Means uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, every rho set to `rho_init`."""
    generator = stream.generator()
    layers = []
    for s_out, s_in in arch.layer_shapes:
        bound = 1.0 / math.sqrt(s_in)
        weight = generator.uniform(-bound, bound, size=(s_out, s_in))
        bias = generator.uniform(-bound, bound, size=s_out)
        layers.append((weight, bias))
    mu = flatten(layers)
    return VariationalParams(mu=mu, rho=np.full_like(mu, rho_init))
