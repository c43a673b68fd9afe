"""Feed-forward classifier with analytic gradients, plus probability-simplex helpers.

Everything is float64 numpy. Batched inputs are row-major ``(n, d)`` arrays;
single vectors of shape ``(d,)`` are accepted and returned unbatched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

PROB_FLOOR = 1e-12
HIDDEN_ACTIVATIONS = ("tanh", "relu", "linear")


class DimensionError(ValueError):
    def __init__(self, expected: int, actual: int, what: str = "input"):
        super().__init__(f"{what} dimension mismatch: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class StaleCacheError(RuntimeError):
    pass


class NonFiniteError(ValueError):
    pass


class ZeroNormError(ValueError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (n_in, n_out)
    bias: np.ndarray  # (n_out,)
    activation: str = "tanh"

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpModel:
    """Stack of dense layers; ``layers[:split_index]`` is the feature extractor,
    the rest is the task head ending in softmax."""

    layers: list[Layer]
    split_index: int
    dropout_rate: float = 0.0
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ValueError("need at least one feature layer and one head layer")
        if not 0 < self.split_index < len(self.layers):
            raise ValueError(f"split_index must lie in (0, {len(self.layers)}), got {self.split_index}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for k, layer in enumerate(self.layers):
            layer.weight = np.asarray(layer.weight, dtype=np.float64)
            layer.bias = np.asarray(layer.bias, dtype=np.float64)
            if layer.bias.shape != (layer.n_out,):
                raise DimensionError(layer.n_out, layer.bias.shape[0], f"layer {k} bias")
            if k > 0 and layer.n_in != self.layers[k - 1].n_out:
                raise DimensionError(self.layers[k - 1].n_out, layer.n_in, f"layer {k} input")
            last = k == len(self.layers) - 1
            if last and layer.activation != "softmax":
                raise ValueError("last layer activation must be softmax")
            if not last and layer.activation not in HIDDEN_ACTIVATIONS:
                raise ValueError(f"unknown hidden activation {layer.activation!r}")

    @classmethod
    def init(
        cls,
        sizes: list[int],
        *,
        activation: str = "tanh",
        split_index: int | None = None,
        dropout_rate: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> "MlpModel":
        """Glorot-uniform weights, zero biases. ``sizes`` = [d, hidden..., K]."""
        if len(sizes) < 3:
            raise ValueError("sizes needs input, at least one hidden width, and output")
        rng = rng if rng is not None else np.random.default_rng(0)
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (n_in + n_out))
            act = "softmax" if k == len(sizes) - 2 else activation
            layers.append(Layer(rng.uniform(-limit, limit, (n_in, n_out)), np.zeros(n_out), act))
        if split_index is None:
            split_index = len(layers) - 1
        return cls(layers, split_index, dropout_rate)

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def num_classes(self) -> int:
        return self.layers[-1].n_out

    @property
    def feature_dim(self) -> int:
        return self.layers[self.split_index - 1].n_out

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "MlpModel":
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return MlpModel(layers, self.split_index, self.dropout_rate, self.version)

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {
            "split_index": np.array(self.split_index),
            "dropout_rate": np.array(self.dropout_rate),
            "activations": np.array([l.activation for l in self.layers]),
        }
        for k, layer in enumerate(self.layers):
            arrays[f"W{k}"] = layer.weight
            arrays[f"b{k}"] = layer.bias
        return arrays

    @classmethod
    def from_arrays(cls, arrays) -> "MlpModel":
        acts = [str(a) for a in arrays["activations"]]
        layers = [Layer(np.array(arrays[f"W{k}"]), np.array(arrays[f"b{k}"]), a) for k, a in enumerate(acts)]
        return cls(layers, int(arrays["split_index"]), float(arrays["dropout_rate"]))


@dataclass
class GradientTape:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "GradientTape":
        return cls(
            [np.zeros_like(l.weight) for l in model.layers],
            [np.zeros_like(l.bias) for l in model.layers],
        )

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def add(self, other: "GradientTape", scale: float = 1.0) -> "GradientTape":
        """In-place ``self += scale * other`` over parameter buffers."""
        if len(other.weights) != len(self.weights):
            raise DimensionError(len(self.weights), len(other.weights), "tape layer count")
        for mine, theirs in zip(self.parameters(), other.parameters()):
            if mine.shape != theirs.shape:
                raise ValueError(f"tape shape mismatch {mine.shape} vs {theirs.shape}")
            mine += scale * theirs
        return self

    def scale(self, factor: float) -> "GradientTape":
        for buf in self.parameters():
            buf *= factor
        if self.input is not None:
            self.input = self.input * factor
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def matches(self, model: MlpModel) -> bool:
        if len(self.weights) != len(model.layers):
            return False
        return all(t.shape == p.shape for t, p in zip(self.parameters(), model.parameters()))


@dataclass
class ForwardCache:
    start: int
    stop: int
    inputs: list[np.ndarray]  # input to each layer in [start, stop)
    acts: list[np.ndarray]  # activation output per layer, before dropout
    masks: list[np.ndarray | None]  # inverted-dropout mask on each layer output
    model_id: int
    version: int
    batched: bool
    logits: np.ndarray | None = None

    @property
    def output(self) -> np.ndarray:
        last = self.acts[-1]
        return last * self.masks[-1] if self.masks[-1] is not None else last

    def boundary(self, k: int) -> np.ndarray:
        """Activations entering layer ``k`` (``start <= k <= stop``)."""
        if k == self.stop:
            return self.output
        return self.inputs[k - self.start]


class ForwardResult(NamedTuple):
    features: np.ndarray
    output: np.ndarray
    cache: ForwardCache
    logits: np.ndarray


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], False
    if x.ndim != 2:
        raise ValueError(f"expected a vector or a (n, d) matrix, got shape {x.shape}")
    return x, True


def forward_layers(
    model: MlpModel,
    h,
    start: int = 0,
    stop: int | None = None,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardCache:
    """Run layers ``[start, stop)`` on ``h``. Dropout hits hidden outputs in train mode."""
    stop = len(model.layers) if stop is None else stop
    if not 0 <= start < stop <= len(model.layers):
        raise ValueError(f"bad layer range [{start}, {stop})")
    h, batched = _as_batch(h)
    if h.shape[1] != model.layers[start].n_in:
        raise DimensionError(model.layers[start].n_in, h.shape[1])
    use_dropout = train and model.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = 1.0 - model.dropout_rate
    inputs, acts, masks = [], [], []
    logits = None
    last = len(model.layers) - 1
    for k in range(start, stop):
        layer = model.layers[k]
        inputs.append(h)
        z = h @ layer.weight + layer.bias
        if layer.activation == "tanh":
            a = np.tanh(z)
        elif layer.activation == "relu":
            a = np.maximum(z, 0.0)
        elif layer.activation == "linear":
            a = z
        else:
            logits = z
            a = softmax(z)
        acts.append(a)
        if use_dropout and k < last:
            mask = (rng.random(a.shape) < keep) / keep
            masks.append(mask)
            h = a * mask
        else:
            masks.append(None)
            h = a
    return ForwardCache(start, stop, inputs, acts, masks, id(model), model.version, batched, logits)


def forward(model: MlpModel, x, mode: str = "eval", rng: np.random.Generator | None = None) -> ForwardResult:
    """Full pass. Returns ``(features, output, cache, logits)``; features are the
    activations entering ``layers[split_index]``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cache = forward_layers(model, x, train=(mode == "train"), rng=rng)
    features = cache.boundary(model.split_index)
    output, logits = cache.output, cache.logits
    if not cache.batched:
        features, output, logits = features[0], output[0], logits[0]
    return ForwardResult(features, output, cache, logits)


def backward_layers(
    model: MlpModel,
    cache: ForwardCache,
    tape: GradientTape,
    grad_out: np.ndarray | None = None,
    *,
    grad_logits: np.ndarray | None = None,
    extra: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Accumulate parameter gradients of layers in the cache range into ``tape``.

    ``grad_out`` is d(loss)/d(cache output); for a range ending at the softmax,
    ``grad_logits`` may be passed instead. ``extra`` maps a boundary index k
    (start <= k <= stop) to an additional gradient on the activations entering
    layer k. Returns the gradient on the range input.
    """
    if cache.model_id != id(model) or cache.version != model.version:
        raise StaleCacheError("cache was produced by a different model or an older parameter version")
    extra = extra or {}
    n = cache.inputs[0].shape[0]
    g = None
    top = cache.stop
    if grad_logits is not None:
        if top != len(model.layers):
            raise ValueError("grad_logits requires a range ending at the softmax layer")
        g = np.asarray(grad_logits, dtype=np.float64).reshape(n, -1)
    elif grad_out is not None:
        g = np.asarray(grad_out, dtype=np.float64).reshape(n, -1)
    if top in extra:
        g = extra[top].reshape(n, -1) if g is None else g + extra[top].reshape(n, -1)
    from_logits = grad_logits is not None
    for k in range(top - 1, cache.start - 1, -1):
        if g is not None:
            i = k - cache.start
            layer = model.layers[k]
            a = cache.acts[i]
            if layer.activation == "softmax":
                if not from_logits:
                    g = a * (g - np.sum(g * a, axis=1, keepdims=True))
            else:
                if cache.masks[i] is not None:
                    g = g * cache.masks[i]
                if layer.activation == "tanh":
                    g = g * (1.0 - a * a)
                elif layer.activation == "relu":
                    g = g * (a > 0.0)
            tape.weights[k] += cache.inputs[i].T @ g
            tape.biases[k] += g.sum(axis=0)
            g = g @ layer.weight.T
        if k in extra:
            g = extra[k].reshape(n, -1) if g is None else g + extra[k].reshape(n, -1)
    if g is None:
        g = np.zeros_like(cache.inputs[0])
    return g


def backward(
    model: MlpModel,
    cache: ForwardCache,
    loss_grad_on_output=None,
    *,
    grad_logits=None,
    grad_features=None,
) -> GradientTape:
    """Gradient tape for a cache from :func:`forward`.

    Upstream gradient may arrive on the probabilities, on the logits, and/or on
    the features at ``split_index``; contributions are summed.
    """
    if cache.start != 0 or cache.stop != len(model.layers):
        raise ValueError("backward expects a full-model cache; use backward_layers for ranges")
    tape = GradientTape.zeros_like(model)
    extra = {}
    if grad_features is not None:
        extra[model.split_index] = np.asarray(grad_features, dtype=np.float64)
    if loss_grad_on_output is None and grad_logits is None and not extra:
        tape.input = np.zeros_like(cache.inputs[0] if cache.batched else cache.inputs[0][0])
        return tape
    g_in = backward_layers(model, cache, tape, loss_grad_on_output, grad_logits=grad_logits, extra=extra)
    tape.input = g_in if cache.batched else g_in[0]
    return tape


# -- simplex utilities -------------------------------------------------------


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("softmax received non-finite logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _xlogy(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # 0 * log(anything) := 0
    return np.where(p > 0.0, p * np.log(np.clip(q, PROB_FLOOR, 1.0)), 0.0)


def entropy(p) -> np.ndarray | float:
    """Shannon entropy in nats along the last axis."""
    p = np.asarray(p, dtype=np.float64)
    return -_xlogy(p, p).sum(axis=-1)


def kl_divergence(p, q) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return (_xlogy(p, p) - _xlogy(p, q)).sum(axis=-1)


def cross_entropy(y, q) -> np.ndarray | float:
    y = np.asarray(y, dtype=np.float64)
    return -_xlogy(y, np.asarray(q, dtype=np.float64)).sum(axis=-1)


def cross_entropy_logit_grad(y: np.ndarray, p: np.ndarray) -> np.ndarray:
    """d CE(y, softmax(z)) / dz for rows of y that sum to one. KL(y, .) shares it."""
    return p * y.sum(axis=-1, keepdims=True) - y


def neg_entropy_logit_grad(p: np.ndarray) -> np.ndarray:
    """d(-H(softmax(z)))/dz."""
    logp = np.log(np.clip(p, PROB_FLOOR, 1.0))
    return p * (logp - np.sum(p * logp, axis=-1, keepdims=True))


def cosine_similarity(a, b) -> np.ndarray | float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ZeroNormError("cosine distance undefined for a zero-norm vector")
    return np.sum(a * b, axis=-1) / (na * nb)


def cosine_distance(a, b) -> np.ndarray | float:
    """``1 - <a/|a|, b/|b|>``, in [0, 2]."""
    return 1.0 - cosine_similarity(a, b)


def cosine_similarity_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise gradient of cosine similarity with respect to ``a``."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    dot = np.sum(a * b, axis=-1, keepdims=True)
    return b / (na * nb) - dot * a / (na**3 * nb)
