"""On-manifold and off-manifold pseudo samples and the two calibration regularizers.

Both generators run a projected sign-gradient inner loop from a uniform random
start inside the perturbation box. Samples are returned as constants; the outer
loss never differentiates through their construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .numerics import (
    GradientTape,
    MlpModel,
    backward,
    cosine_similarity_grad,
    cross_entropy_logit_grad,
    entropy,
    forward,
    kl_divergence,
    neg_entropy_logit_grad,
)

log = logging.getLogger(__name__)

DISTANCES = ("cosine-distance", "cosine-similarity")


@dataclass
class ManifoldSmoothingConfig:
    lambda_on: float = 1.0
    lambda_off: float = 1.0
    delta_on: float = 1e-4
    delta_off: float = 1e-3
    delta_y: float = 0.1
    inner_steps: int = 1
    # "cosine-similarity" descends the raw normalized inner product instead
    distance: str = "cosine-distance"
    random_init: bool = True

    def __post_init__(self):
        if self.lambda_on < 0 or self.lambda_off < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.lambda_on > 0 and not self.delta_on > 0:
            raise ValueError("delta_on must be > 0 when lambda_on > 0")
        if self.lambda_off > 0 and not self.delta_off > 0:
            raise ValueError("delta_off must be > 0 when lambda_off > 0")
        if not 0.0 <= self.delta_y <= 1.0:
            raise ValueError(f"delta_y must lie in [0, 1], got {self.delta_y}")
        if int(self.inner_steps) != self.inner_steps or self.inner_steps < 1:
            raise ValueError("inner_steps must be an integer >= 1")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")


class OnManifoldSample(NamedTuple):
    x_prime: np.ndarray
    y_prime: np.ndarray
    anchor_index: int
    partner_index: int


class OffManifoldSample(NamedTuple):
    x_dprime: np.ndarray
    anchor_index: int


@dataclass
class OnManifoldSamples:
    """Batch of on-manifold samples stored column-wise."""

    x_prime: np.ndarray  # (n, d)
    y_prime: np.ndarray  # (n, K)
    anchor_index: np.ndarray
    partner_index: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor_index)

    def __iter__(self) -> Iterator[OnManifoldSample]:
        for i in range(len(self)):
            yield OnManifoldSample(self.x_prime[i], self.y_prime[i], int(self.anchor_index[i]), int(self.partner_index[i]))


@dataclass
class OffManifoldSamples:
    x_dprime: np.ndarray  # (n, d)
    anchor_index: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor_index)

    def __iter__(self) -> Iterator[OffManifoldSample]:
        for i in range(len(self)):
            yield OffManifoldSample(self.x_dprime[i], int(self.anchor_index[i]))


def project_ball(x: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the l-inf ball around each row of ``center``."""
    return center + np.clip(x - center, -radius, radius)


def project_sphere(x: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Clamp onto the l-inf ball, then push rows that ended strictly inside out
    to the sphere along their largest-magnitude coordinate (lowest index wins ties)."""
    delta = np.clip(x - center, -radius, radius)
    mag = np.abs(delta)
    inside = mag.max(axis=1) < radius
    if np.any(inside):
        rows = np.nonzero(inside)[0]
        cols = np.argmax(mag[rows], axis=1)
        signs = np.where(delta[rows, cols] < 0.0, -1.0, 1.0)
        delta[rows, cols] = signs * radius
    return center + delta


def _check_batch(x, y=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("regularizers need a non-empty (n, d) batch")
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if y.shape[0] != x.shape[0]:
            raise ValueError(f"batch has {len(x)} inputs but {len(y)} labels")
    return x, y


def _init_noise(rng, radius, shape, random_init):
    if not random_init:
        return np.zeros(shape)
    return rng.uniform(-radius, radius, size=shape)


def interpolate_labels(y: np.ndarray, y_partner: np.ndarray, delta_y: float) -> np.ndarray:
    return (1.0 - delta_y) * y + delta_y * y_partner


def generate_on_manifold(
    model: MlpModel,
    x,
    y,
    config: ManifoldSmoothingConfig,
    rng: np.random.Generator,
    partners: np.ndarray | None = None,
) -> OnManifoldSamples:
    """Move each anchor toward a random batch partner in feature space while
    staying inside the ``delta_on`` l-inf ball; interpolate labels by ``delta_y``.

    Anchors whose features have zero norm are dropped with a warning.
    """
    x, y = _check_batch(x, y)
    n, d = x.shape
    delta = config.delta_on
    if partners is None:
        partners = rng.integers(0, n, size=n)
    x_prime = x + _init_noise(rng, delta, (n, d), config.random_init)
    target = forward(model, x[partners]).features
    keep = np.linalg.norm(target, axis=1) > 0.0
    sign = -1.0 if config.distance == "cosine-distance" else 1.0
    for _ in range(config.inner_steps):
        feats, _, cache, _ = forward(model, x_prime)
        keep &= np.linalg.norm(feats, axis=1) > 0.0
        safe_a = np.where(keep[:, None], feats, 1.0)
        safe_b = np.where(keep[:, None], target, 1.0)
        grad_feats = sign * cosine_similarity_grad(safe_a, safe_b) * keep[:, None]
        grad_x = backward(model, cache, grad_features=grad_feats).input
        x_prime = project_ball(x_prime - delta * np.sign(grad_x), x, delta)
    if not np.all(keep):
        log.warning("skipping %d on-manifold samples with zero-norm features", int(np.sum(~keep)))
    idx = np.nonzero(keep)[0]
    y_prime = interpolate_labels(y[idx], y[partners[idx]], config.delta_y)
    return OnManifoldSamples(x_prime[idx], y_prime, idx, partners[idx])


def generate_off_manifold(
    model: MlpModel,
    x,
    y,
    config: ManifoldSmoothingConfig,
    rng: np.random.Generator,
) -> OffManifoldSamples:
    """Sign-gradient ascent on the classification loss, projected onto the
    ``delta_off`` l-inf sphere around each anchor."""
    x, y = _check_batch(x, y)
    n, d = x.shape
    delta = config.delta_off
    x_dprime = x + _init_noise(rng, delta, (n, d), config.random_init)
    for _ in range(config.inner_steps):
        _, probs, cache, _ = forward(model, x_dprime)
        grad_x = backward(model, cache, grad_logits=cross_entropy_logit_grad(y, probs)).input
        x_dprime = project_sphere(x_dprime + delta * np.sign(grad_x), x, delta)
    return OffManifoldSamples(x_dprime, np.arange(n))


def r_on(
    model: MlpModel,
    samples: OnManifoldSamples,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[float, GradientTape]:
    """Mean KL(y', model(x')) and its parameter gradient."""
    if len(samples) == 0:
        return 0.0, GradientTape.zeros_like(model)
    _, probs, cache, _ = forward(model, samples.x_prime, mode, rng)
    n = len(samples)
    loss = float(np.mean(kl_divergence(samples.y_prime, probs)))
    tape = backward(model, cache, grad_logits=cross_entropy_logit_grad(samples.y_prime, probs) / n)
    return loss, tape


def r_off(
    model: MlpModel,
    samples: OffManifoldSamples,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[float, GradientTape]:
    """Mean negative entropy of model(x''); lies in [-log K, 0]."""
    if len(samples) == 0:
        return 0.0, GradientTape.zeros_like(model)
    _, probs, cache, _ = forward(model, samples.x_dprime, mode, rng)
    n = len(samples)
    loss = float(-np.mean(entropy(probs)))
    tape = backward(model, cache, grad_logits=neg_entropy_logit_grad(probs) / n)
    return loss, tape
