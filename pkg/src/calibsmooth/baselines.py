"""Comparison calibration methods: temperature scaling, MC dropout, label
smoothing, entropy-regularized loss, mixup and manifold mixup."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    GradientTape,
    MlpModel,
    backward,
    backward_layers,
    cross_entropy,
    cross_entropy_logit_grad,
    entropy,
    forward,
    forward_layers,
    neg_entropy_logit_grad,
    softmax,
)

log = logging.getLogger(__name__)

BASELINES = (
    "vanilla",
    "temperature-scaling",
    "mc-dropout",
    "label-smoothing",
    "entropy-regularized",
    "mixup",
    "manifold-mixup",
)


@dataclass
class BaselineSpec:
    kind: str = "vanilla"
    smoothing: float = 0.1
    erl_weight: float = 0.1
    mixup_alpha: float = 0.2
    mixup_layer: int | None = None  # None -> the model's split_index
    mc_passes: int = 10
    temperature_min: float = 0.05
    temperature_max: float = 10.0

    def __post_init__(self):
        if self.kind not in BASELINES:
            raise ValueError(f"unknown baseline {self.kind!r}; choose from {BASELINES}")
        if not 0.0 < self.smoothing < 1.0:
            raise ValueError("smoothing must lie in (0, 1)")
        if self.erl_weight < 0:
            raise ValueError("erl_weight must be >= 0")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be > 0")
        if self.mc_passes < 1:
            raise ValueError("mc_passes must be >= 1")
        if not 0 < self.temperature_min < self.temperature_max:
            raise ValueError("temperature range must satisfy 0 < min < max")


# -- temperature scaling -----------------------------------------------------


def apply_temperature(logits, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    return softmax(np.asarray(logits, dtype=np.float64) / temperature)


def temperature_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def fit_temperature(
    logits,
    labels,
    t_min: float = 0.05,
    t_max: float = 10.0,
    ratio: float = 1.1,
    tol: float = 1e-4,
) -> float:
    """Dev-set NLL minimizer: geometric grid scan, then golden-section refinement."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("temperature fitting needs a non-empty dev set")
    if len(np.unique(labels)) < 2:
        log.warning("dev set contains a single class; using temperature 1")
        return 1.0
    grid = [t_min]
    while grid[-1] * ratio <= t_max:
        grid.append(grid[-1] * ratio)
    grid.append(t_max)
    nll = [temperature_nll(logits, labels, t) for t in grid]
    best = int(np.argmin(nll))
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, len(grid) - 1)]
    inv_phi = (math.sqrt(5) - 1) / 2
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = temperature_nll(logits, labels, c), temperature_nll(logits, labels, d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = temperature_nll(logits, labels, c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = temperature_nll(logits, labels, d)
    return (a + b) / 2


# -- MC dropout ---------------------------------------------------------------


def mc_dropout_predict(model: MlpModel, x, passes: int, rng: np.random.Generator) -> np.ndarray:
    """Average of ``passes`` train-mode forward passes."""
    if passes < 1:
        raise ValueError("passes must be >= 1")
    if model.dropout_rate == 0.0:
        log.warning("mc-dropout on a model without dropout equals the deterministic forward")
        return forward(model, x).output
    total = None
    for _ in range(passes):
        out = forward(model, x, "train", rng).output
        total = out if total is None else total + out
    return total / passes


# -- label smoothing / ERL ------------------------------------------------------


def smooth_labels(y, epsilon: float) -> np.ndarray:
    """Move ``epsilon`` mass from the true class, spread evenly over the others."""
    y = np.asarray(y, dtype=np.float64)
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    k = y.shape[-1]
    return y * (1.0 - epsilon) + (1.0 - y) * epsilon / (k - 1)


def erl_loss(output, y, weight: float):
    """Cross entropy minus ``weight`` times the output entropy."""
    if weight < 0:
        raise ValueError("weight must be >= 0")
    return cross_entropy(y, output) - weight * entropy(output)


def erl_logit_grad(probs: np.ndarray, y: np.ndarray, weight: float) -> np.ndarray:
    return cross_entropy_logit_grad(y, probs) + weight * neg_entropy_logit_grad(probs)


# -- mixup --------------------------------------------------------------------


@dataclass
class MixedBatch:
    x: np.ndarray  # interpolated inputs or hidden states
    y: np.ndarray
    lam: float
    perm: np.ndarray


def sample_mix_weight(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    return float(rng.beta(alpha, alpha))


def mixup_batch(x, y, alpha: float, rng: np.random.Generator, lam: float | None = None) -> MixedBatch:
    """Interpolate each row with a partner from a random permutation of the batch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("mixup needs a batch of at least 2")
    if lam is None:
        lam = sample_mix_weight(alpha, rng)
    perm = rng.permutation(len(x))
    return MixedBatch(lam * x + (1 - lam) * x[perm], lam * y + (1 - lam) * y[perm], lam, perm)


def manifold_mixup_loss(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    layer_index: int | None = None,
    dropout_rng: np.random.Generator | None = None,
    lam: float | None = None,
) -> tuple[float, GradientTape]:
    """Mix hidden activations entering ``layers[layer_index]`` and finish the pass.

    Returns mean cross entropy against mixed labels and its parameter gradient.
    """
    k = model.split_index if layer_index is None else layer_index
    if not 0 < k < len(model.layers):
        raise ValueError(f"mixup layer must lie in (0, {len(model.layers)})")
    lower = forward_layers(model, x, 0, k, train=True, rng=dropout_rng)
    mixed = mixup_batch(lower.output, y, alpha, rng, lam)
    upper = forward_layers(model, mixed.x, k, train=True, rng=dropout_rng)
    probs = upper.output
    n = len(x)
    loss = float(np.mean(cross_entropy(mixed.y, probs)))
    tape = GradientTape.zeros_like(model)
    g_mix = backward_layers(model, upper, tape, grad_logits=cross_entropy_logit_grad(mixed.y, probs) / n)
    g_h = mixed.lam * g_mix
    np.add.at(g_h, mixed.perm, (1 - mixed.lam) * g_mix)
    backward_layers(model, lower, tape, g_h)
    return loss, tape


# -- training losses -------------------------------------------------------------


def baseline_loss(
    spec: BaselineSpec,
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    mix_rng: np.random.Generator,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[float, GradientTape]:
    """Mean training loss of a baseline on one mini-batch, with gradient.

    Temperature scaling and MC dropout train with plain cross entropy; they
    differ only at prediction time.
    """
    n = len(x)
    if spec.kind == "manifold-mixup":
        return manifold_mixup_loss(model, x, y, spec.mixup_alpha, mix_rng, spec.mixup_layer, dropout_rng)
    if spec.kind == "mixup":
        mixed = mixup_batch(x, y, spec.mixup_alpha, mix_rng)
        x, y = mixed.x, mixed.y
    elif spec.kind == "label-smoothing":
        y = smooth_labels(y, spec.smoothing)
    _, probs, cache, _ = forward(model, x, "train", dropout_rng)
    if spec.kind == "entropy-regularized":
        loss = float(np.mean(erl_loss(probs, y, spec.erl_weight)))
        grad = erl_logit_grad(probs, y, spec.erl_weight)
    else:
        loss = float(np.mean(cross_entropy(y, probs)))
        grad = cross_entropy_logit_grad(y, probs)
    return loss, backward(model, cache, grad_logits=grad / n)
