"""Hidden Markov models with diagonal-Gaussian emissions.

Forward likelihood, multi-sequence Baum-Welch and K-means initialization.
All probability arithmetic happens in log space. Training batches every
observation sequence into one padded array so the recursions loop over
time steps only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy.special import logsumexp

from src.errors import DimensionMismatchError, TrainingError

logger = logging.getLogger(__name__)

MODEL_FORMAT = "gaussian-hmm"
MODEL_VERSION = 1

FLOOR_RELATIVE = 1e-6
FLOOR_ABSOLUTE = 1e-8
STOCHASTIC_TOLERANCE = 1e-9
DEFAULT_MAX_ITER = 100
DEFAULT_TOL = 1e-4
KMEANS_MAX_ITER = 100

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GaussianHmm:
    """λ = (A, B, π) with one diagonal Gaussian per state.

    Arrays are copied and made read-only on construction, so a model can be
    shared between threads.
    """

    transition: np.ndarray
    initial: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        for name in ("transition", "initial", "means", "variances"):
            array = np.array(getattr(self, name), dtype=float)
            array.setflags(write=False)
            object.__setattr__(self, name, array)

        n = self.initial.shape[0] if self.initial.ndim == 1 else -1
        if n < 1 or self.transition.shape != (n, n):
            raise ValueError(f"transition must be {n}x{n}, got {self.transition.shape}")
        if self.means.ndim != 2 or self.means.shape[0] != n or self.means.shape[1] < 1:
            raise ValueError(f"means must be {n}xt, got {self.means.shape}")
        if self.variances.shape != self.means.shape:
            raise ValueError("variances must have the same shape as means")
        if np.any(self.transition < 0) or np.any(self.initial < 0):
            raise ValueError("probabilities must be non-negative")
        if not np.allclose(self.transition.sum(axis=1), 1.0, rtol=0, atol=STOCHASTIC_TOLERANCE):
            raise ValueError("transition rows must sum to 1")
        if abs(self.initial.sum() - 1.0) > STOCHASTIC_TOLERANCE:
            raise ValueError("initial distribution must sum to 1")
        if np.any(self.variances <= 0) or not np.all(np.isfinite(self.variances)):
            raise ValueError("variances must be positive and finite")

    @property
    def n_states(self) -> int:
        return self.initial.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


# --- helpers ----------------------------------------------------------------


def _as_sequences(seqs: Sequence[np.ndarray], dim: int | None = None) -> list[np.ndarray]:
    out = []
    for i, seq in enumerate(seqs):
        array = np.asarray(seq, dtype=float)
        if array.ndim == 1:
            array = array[:, None]
        if array.shape[0] == 0:
            raise ValueError(f"observation sequence {i} is empty")
        if dim is not None and array.shape[1] != dim:
            raise DimensionMismatchError(f"sequence {i} has dimension {array.shape[1]}, model expects {dim}")
        out.append(array)
    return out


def _pad(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    padded = np.zeros((len(seqs), int(lengths.max()), seqs[0].shape[1]))
    for i, s in enumerate(seqs):
        padded[i, : len(s)] = s
    return padded, lengths


def variance_floor(observations: np.ndarray) -> np.ndarray:
    """Per-dimension lower bound on emission variances: 1e-6 of the sample variance, at least 1e-8."""
    return np.maximum(FLOOR_RELATIVE * observations.var(axis=0), FLOOR_ABSOLUTE)


def log_emission(model: GaussianHmm, observations: np.ndarray) -> np.ndarray:
    """log b_n(x) for every observation (leading axes kept) and state (last axis)."""
    diff = observations[..., None, :] - model.means
    return -0.5 * (
        np.sum(_LOG_2PI + np.log(model.variances), axis=-1) + np.sum(diff * diff / model.variances, axis=-1)
    )


def _log_params(model: GaussianHmm) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore"):
        return np.log(model.initial), np.log(model.transition)


def _forward(log_pi, log_a, log_b, lengths) -> tuple[np.ndarray, np.ndarray]:
    n_seq, horizon, _ = log_b.shape
    log_alpha = np.empty_like(log_b)
    log_alpha[:, 0] = log_pi + log_b[:, 0]
    for t in range(1, horizon):
        step = logsumexp(log_alpha[:, t - 1, :, None] + log_a[None], axis=1) + log_b[:, t]
        log_alpha[:, t] = np.where((t < lengths)[:, None], step, log_alpha[:, t - 1])
    loglik = logsumexp(log_alpha[np.arange(n_seq), lengths - 1], axis=1)
    return log_alpha, loglik


def _backward(log_a, log_b, lengths) -> np.ndarray:
    _, horizon, _ = log_b.shape
    log_beta = np.zeros_like(log_b)
    for t in range(horizon - 2, -1, -1):
        step = logsumexp(log_a[None] + (log_b[:, t + 1] + log_beta[:, t + 1])[:, None, :], axis=2)
        log_beta[:, t] = np.where((t < lengths - 1)[:, None], step, 0.0)
    return log_beta


# --- likelihood -------------------------------------------------------------


def log_likelihoods(model: GaussianHmm, seqs: Sequence[np.ndarray]) -> np.ndarray:
    """log P(O|λ) for each sequence, computed together."""
    batch = _as_sequences(seqs, model.dim)
    if not batch:
        return np.empty(0)
    observations, lengths = _pad(batch)
    log_pi, log_a = _log_params(model)
    with np.errstate(divide="ignore", invalid="ignore"):
        _, loglik = _forward(log_pi, log_a, log_emission(model, observations), lengths)
    return loglik


def log_likelihood(model: GaussianHmm, seq: np.ndarray) -> float:
    """Natural-log density of one observation sequence under the model (forward algorithm)."""
    array = np.asarray(seq, dtype=float)
    if array.ndim == 1:
        array = array[:, None] if model.dim == 1 else array[None, :]
    if array.shape[0] == 0:
        raise ValueError("cannot score an empty observation sequence")
    return float(log_likelihoods(model, [array])[0])


# --- initialization ---------------------------------------------------------


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [points[rng.integers(len(points))]]
    closest = np.sum((points - centroids[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            index = rng.choice(len(points), p=closest / total)
        else:
            index = rng.integers(len(points))
        centroids.append(points[index])
        closest = np.minimum(closest, np.sum((points - points[index]) ** 2, axis=1))
    return np.array(centroids)


def kmeans_init(seqs: Sequence[np.ndarray], n_states: int, seed: int, max_iter: int = KMEANS_MAX_ITER) -> GaussianHmm:
    """Initial model from Lloyd's K-means (K-means++ seeding) over all pooled vectors.

    Means are the centroids, variances the floored within-cluster
    variances, A and π uniform.
    """
    batch = _as_sequences(seqs)
    if not batch:
        raise TrainingError("no observation sequences to initialize from")
    points = np.concatenate(batch)
    if len(points) < n_states:
        raise TrainingError(f"{len(points)} observation vectors cannot seed {n_states} states")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(points, n_states, rng)
    labels = np.zeros(len(points), dtype=np.int64)
    for _ in range(max_iter):
        distances = np.sum((points[:, None, :] - centroids[None]) ** 2, axis=2)
        labels = np.argmin(distances, axis=1)
        updated = centroids.copy()
        for k in range(n_states):
            members = points[labels == k]
            if len(members):
                updated[k] = members.mean(axis=0)
            else:
                updated[k] = points[np.argmax(distances.min(axis=1))]
        if np.array_equal(updated, centroids):
            break
        centroids = updated

    floor = variance_floor(points)
    variances = np.empty_like(centroids)
    for k in range(n_states):
        members = points[labels == k]
        variances[k] = members.var(axis=0) if len(members) else points.var(axis=0)
    variances = np.maximum(variances, floor)

    return GaussianHmm(
        transition=np.full((n_states, n_states), 1.0 / n_states),
        initial=np.full(n_states, 1.0 / n_states),
        means=centroids,
        variances=variances,
    )


# --- training ---------------------------------------------------------------


def _reseed_dead_states(
    dead: np.ndarray, means, variances, transition, initial, observations, lengths, log_b, floor
) -> None:
    """Move every dead state onto the worst-explained observation and make it reachable again."""
    mask = np.arange(observations.shape[1])[None, :] < lengths[:, None]
    fit = np.where(mask, log_b.max(axis=2), np.inf).ravel()
    flat = observations.reshape(-1, observations.shape[2])
    pooled = flat[mask.ravel()]
    n_states = transition.shape[0]
    for k in np.flatnonzero(dead):
        index = int(np.argmin(fit))
        logger.warning("state %d lost all posterior mass, re-seeding it at observation %s", k, flat[index])
        means[k] = flat[index]
        variances[k] = np.maximum(pooled.var(axis=0), floor)
        transition[k] = 1.0 / n_states
        transition[:, k] = np.maximum(transition[:, k], 1.0 / n_states)
        initial[k] = max(initial[k], 1.0 / n_states)
        fit[index] = np.inf


def baum_welch(
    seqs: Sequence[np.ndarray],
    n_states: int,
    init: GaussianHmm,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> tuple[GaussianHmm, list[float]]:
    """Unsupervised EM over several sequences.

    Returns the trained model and the total log-likelihood measured at the
    start of every iteration. Stops once an iteration improves the total
    by less than `tol` or after `max_iter` iterations.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if init.n_states != n_states:
        raise ValueError(f"initial model has {init.n_states} states, expected {n_states}")
    batch = _as_sequences(seqs, init.dim)
    if not batch:
        raise TrainingError("no observation sequences to train on")

    observations, lengths = _pad(batch)
    n_seq, horizon, _ = observations.shape
    valid = (np.arange(horizon)[None, :] < lengths[:, None]).astype(float)
    pair_valid = (np.arange(horizon - 1)[None, :] < (lengths - 1)[:, None]).astype(float)
    floor = variance_floor(np.concatenate(batch))

    model = init
    trace: list[float] = []
    for iteration in range(max_iter):
        log_pi, log_a = _log_params(model)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            log_b = log_emission(model, observations)
            log_alpha, loglik = _forward(log_pi, log_a, log_b, lengths)
            total = float(loglik.sum())
            if not np.isfinite(total):
                raise TrainingError(f"non-finite log-likelihood at iteration {iteration}")
            trace.append(total)
            if iteration > 0 and total - trace[-2] < tol:
                break

            log_beta = _backward(log_a, log_b, lengths)
            gamma = np.exp(log_alpha + log_beta - loglik[:, None, None]) * valid[:, :, None]
            if horizon > 1:
                log_xi = (
                    log_alpha[:, :-1, :, None]
                    + log_a[None, None]
                    + (log_b[:, 1:] + log_beta[:, 1:])[:, :, None, :]
                    - loglik[:, None, None, None]
                )
                xi_sum = np.einsum("st,stij->ij", pair_valid, np.exp(log_xi))
            else:
                xi_sum = np.zeros((n_states, n_states))

        occupancy = gamma.sum(axis=(0, 1))
        initial = gamma[:, 0].sum(axis=0) / n_seq

        row_mass = xi_sum.sum(axis=1, keepdims=True)
        transition = np.where(row_mass > 0, xi_sum / np.where(row_mass > 0, row_mass, 1.0), model.transition)

        safe_occupancy = np.where(occupancy > 0, occupancy, 1.0)[:, None]
        means = np.einsum("stn,std->nd", gamma, observations) / safe_occupancy
        diff = observations[:, :, None, :] - means[None, None]
        variances = np.einsum("stn,stnd->nd", gamma, diff * diff) / safe_occupancy
        variances = np.maximum(variances, floor)

        dead = occupancy <= np.finfo(float).tiny
        if dead.any():
            means = np.where(dead[:, None], model.means, means)
            variances = np.where(dead[:, None], model.variances, variances)
            _reseed_dead_states(dead, means, variances, transition, initial, observations, lengths, log_b, floor)

        transition = transition / transition.sum(axis=1, keepdims=True)
        model = GaussianHmm(transition, initial / initial.sum(), means, variances)

    return model, trace


def sample(model: GaussianHmm, length: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw a hidden state path and its observations from the model."""
    states = np.empty(length, dtype=np.int64)
    states[0] = rng.choice(model.n_states, p=model.initial)
    for t in range(1, length):
        states[t] = rng.choice(model.n_states, p=model.transition[states[t - 1]])
    noise = rng.standard_normal((length, model.dim))
    return states, model.means[states] + noise * np.sqrt(model.variances[states])


# --- serialization ----------------------------------------------------------


def to_dict(model: GaussianHmm, subset_tag: str | None = None) -> dict[str, Any]:
    document: dict[str, Any] = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_states": model.n_states,
        "dim": model.dim,
        "transition": model.transition.tolist(),
        "initial": model.initial.tolist(),
        "means": model.means.tolist(),
        "variances": model.variances.tolist(),
    }
    if subset_tag is not None:
        document["subset"] = subset_tag
    return document


def from_dict(document: dict[str, Any]) -> GaussianHmm:
    if document.get("format") != MODEL_FORMAT or document.get("version") != MODEL_VERSION:
        raise ValueError(f"not a {MODEL_FORMAT} v{MODEL_VERSION} document")
    model = GaussianHmm(
        transition=np.array(document["transition"], dtype=float),
        initial=np.array(document["initial"], dtype=float),
        means=np.array(document["means"], dtype=float),
        variances=np.array(document["variances"], dtype=float),
    )
    if model.n_states != document["n_states"] or model.dim != document["dim"]:
        raise ValueError("model document shape fields disagree with its arrays")
    return model
