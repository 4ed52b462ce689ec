"""Accuracy, predictive uncertainty and the Hellinger generalization error."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
from pydantic import BaseModel, model_validator

from pfedbayes.bnn import NetworkArch, VariationalParams, forward_cache, kl_diag_gauss, predict_bma
from pfedbayes.meta_consts import LIKELIHOOD
from pfedbayes.tensor import RngStream

SIMPLEX_TOLERANCE = 1e-6


class EvalReport(BaseModel):
    """The evaluation of one round."""

    per_client_pm_acc: list[float] = []
    gm_acc: float | None = None
    mean_kl: float
    hellinger: float | None = None
    mean_entropy: float | None = None
    """The mean predictive entropy of the global model on the union of the evaluation shards, in nats."""
    per_client_pm_entropy: list[float] = []

    @model_validator(mode="after")
    def validator_ranges(self) -> EvalReport:
        accuracies = [*self.per_client_pm_acc, *([self.gm_acc] if self.gm_acc is not None else [])]
        if any(not 0.0 <= acc <= 1.0 for acc in accuracies):
            raise ValueError("Accuracies must lie in [0, 1].")
        if self.hellinger is not None and not 0.0 <= self.hellinger <= 1.0:
            raise ValueError("The Hellinger error must lie in [0, 1].")
        return self

    @property
    def pm_acc(self) -> float | None:
        """The uniform average of the per-client personalized accuracies."""
        if not self.per_client_pm_acc:
            return None
        return float(np.mean(self.per_client_pm_acc))

    @property
    def pm_entropy(self) -> float | None:
        if not self.per_client_pm_entropy:
            return None
        return float(np.mean(self.per_client_pm_entropy))


def accuracy(predict: Callable[[np.ndarray], np.ndarray], features: np.ndarray, labels: np.ndarray) -> float:
    """The fraction of samples whose most probable class is the label.

    Ties go to the lowest class index.

    Args:
        predict: Maps a batch of inputs to one row of class probabilities per input.
        features: The evaluation inputs, one per row.
        labels: The class index of each input.
    """
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise ValueError("Cannot compute the accuracy of an empty evaluation set.")
    probs = np.asarray(predict(np.asarray(features, dtype=np.float64)))
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def predictive_entropy(probs: np.ndarray | list[float]) -> float:
    """-sum p log p of one probability vector, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("Expected a non-empty probability vector.")
    if p.min() < -SIMPLEX_TOLERANCE or abs(p.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise ValueError(f"Not a probability vector within {SIMPLEX_TOLERANCE}: sum {p.sum()}, min {p.min()}.")
    p = np.clip(p, 0.0, 1.0)
    positive = p[p > 0]
    return float(max(-np.sum(positive * np.log(positive)), 0.0))


def mean_predictive_entropy(prob_rows: np.ndarray) -> float:
    """The mean `predictive_entropy` over rows of probability vectors."""
    p = np.atleast_2d(np.asarray(prob_rows, dtype=np.float64))
    if p.min() < -SIMPLEX_TOLERANCE or np.any(np.abs(p.sum(axis=1) - 1.0) > SIMPLEX_TOLERANCE):
        raise ValueError(f"Not every row is a probability vector within {SIMPLEX_TOLERANCE}.")
    p = np.clip(p, 0.0, 1.0)
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(np.mean(np.maximum(-terms.sum(axis=1), 0.0)))


def hellinger_error(
    arch: NetworkArch,
    v: VariationalParams,
    true_fn: Callable[[np.ndarray], np.ndarray],
    x_eval: np.ndarray,
    sigma_eps: float,
    k_mc: int,
    stream: RngStream,
) -> float:
    """The squared Hellinger distance between the fitted and the true Gaussian regression model, averaged over
    the inputs and over `k_mc` weight draws from `v`.

    d^2 = E_x[1 - exp(-|f_theta(x) - f(x)|^2 / (8 sigma_eps^2))]
    """
    if arch.likelihood != LIKELIHOOD.gaussian:
        raise TypeError("The Hellinger error is only defined for a gaussian likelihood.")
    if k_mc < 1:
        raise ValueError(f"k_mc must be at least 1, got {k_mc}.")
    if sigma_eps <= 0:
        raise ValueError(f"sigma_eps must be positive, got {sigma_eps}.")
    inputs = np.atleast_2d(np.asarray(x_eval, dtype=np.float64))
    truth = np.asarray(true_fn(inputs), dtype=np.float64).reshape(inputs.shape[0], -1)
    draws = stream.generator().standard_normal((k_mc, v.size))
    sigma = v.sigma
    total = 0.0
    for g in draws:
        total += hellinger_from_outputs(forward_cache(arch, v.mu + sigma * g, inputs).output, truth, sigma_eps)
    return min(max(total / k_mc, 0.0), 1.0)


def hellinger_from_outputs(fitted: np.ndarray, truth: np.ndarray, sigma_eps: float) -> float:
    """The input-averaged Hellinger error of one set of fitted means against the true means."""
    squared = np.sum((np.atleast_2d(fitted) - np.atleast_2d(truth)) ** 2, axis=1)
    return float(np.mean(-np.expm1(-squared / (8.0 * sigma_eps**2))))


def point_hellinger_error(
    arch: NetworkArch,
    theta: np.ndarray,
    true_fn: Callable[[np.ndarray], np.ndarray],
    x_eval: np.ndarray,
    sigma_eps: float,
) -> float:
    """`hellinger_error` of a single deterministic network."""
    if arch.likelihood != LIKELIHOOD.gaussian:
        raise TypeError("The Hellinger error is only defined for a gaussian likelihood.")
    inputs = np.atleast_2d(np.asarray(x_eval, dtype=np.float64))
    truth = np.asarray(true_fn(inputs), dtype=np.float64).reshape(inputs.shape[0], -1)
    return min(max(hellinger_from_outputs(forward_cache(arch, theta, inputs).output, truth, sigma_eps), 0.0), 1.0)


def mean_kl(clients: list[VariationalParams], v_global: VariationalParams) -> float:
    """The mean of KL(q_i || w) over clients."""
    if not clients:
        raise ValueError("Need at least one client.")
    return float(np.mean([kl_diag_gauss(v_i, v_global) for v_i in clients]))


def evaluate_classifier(
    arch: NetworkArch,
    v: VariationalParams,
    features: np.ndarray,
    labels: np.ndarray,
    k_eval: int,
    stream: RngStream,
) -> tuple[float, float]:
    """The BMA accuracy and mean predictive entropy of `v` on one evaluation set."""
    probs = predict_bma(arch, v, features, k_eval, stream)
    return accuracy(lambda _: probs, features, labels), mean_predictive_entropy(probs)


def evaluate_personalized(
    arch: NetworkArch,
    v_personal: VariationalParams,
    features: np.ndarray,
    labels: np.ndarray,
    k_eval: int,
    stream: RngStream,
) -> tuple[float, float]:
    """One client's personalized BMA predictor on its own test shard."""
    return evaluate_classifier(arch, v_personal, features, labels, k_eval, stream)


def evaluate_global(
    arch: NetworkArch,
    v_global: VariationalParams,
    features: np.ndarray,
    labels: np.ndarray,
    k_eval: int,
    stream: RngStream,
) -> tuple[float, float]:
    """The global BMA predictor on the union of the client test shards."""
    return evaluate_classifier(arch, v_global, features, labels, k_eval, stream)
