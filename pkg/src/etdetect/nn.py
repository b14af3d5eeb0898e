"""Dense feed-forward classifiers in float64 numpy.

Everything the reverse-engineering and attack code needs from a network lives
here: logits, posteriors, penultimate features, gradients with respect to the
*input*, and a small mini-batch trainer (SGD or Adam on mean cross-entropy).

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``X`` of shape
``(B, n)`` is propagated as ``X @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid")
LEAKY_SLOPE = 0.01

# A loss spec maps logits (B, K) to (per-sample values (B,), dvalue/dlogits (B, K)).
LossSpec = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]


class TrainingError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    return expit(z)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # relu'(0) := 0 and leaky_relu'(0) := LEAKY_SLOPE
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    return a * (1.0 - a)


@dataclass
class Classifier:
    """Fully connected network ``n -> h_1 -> ... -> K``.

    ``weights[l]`` has shape ``(layer_dims[l], layer_dims[l + 1])``. The
    activation is applied after every layer except the last one, whose output
    is the logit vector.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {l}: weight {W.shape} / bias {b.shape} mismatch")
            if l and W.shape[0] != self.weights[l - 1].shape[1]:
                raise ValueError(f"layer {l}: expects {W.shape[0]} inputs, "
                                 f"previous layer emits {self.weights[l - 1].shape[1]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameters")
        if self.n_classes < 2:
            raise ValueError("output dimension must be >= 2")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "Classifier":
        return Classifier([W.copy() for W in self.weights],
                          [b.copy() for b in self.biases], self.activation)

    def predict(self, x: np.ndarray) -> np.ndarray | int:
        logits = forward_logits(self, x)
        if logits.ndim == 1:
            return int(np.argmax(logits))
        return np.argmax(logits, axis=1)

    # -- serialization -------------------------------------------------------
    # json writes floats with repr(), which round-trips float64 exactly.

    def to_dict(self) -> dict:
        return {
            "layer_dims": self.layer_dims,
            "activation": self.activation,
            "layers": [{"W": W.ravel().tolist(), "b": b.tolist()}
                       for W, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Classifier":
        dims = d["layer_dims"]
        if len(d["layers"]) != len(dims) - 1:
            raise ValueError("layer count does not match layer_dims")
        weights, biases = [], []
        for l, layer in enumerate(d["layers"]):
            W = np.asarray(layer["W"], dtype=np.float64)
            if W.size != dims[l] * dims[l + 1]:
                raise ValueError(f"layer {l}: W has {W.size} entries, "
                                 f"expected {dims[l]}x{dims[l + 1]}")
            weights.append(W.reshape(dims[l], dims[l + 1]))
            biases.append(np.asarray(layer["b"], dtype=np.float64))
        return cls(weights, biases, d.get("activation", "relu"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Classifier":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Classifier":
        with open(path) as fh:
            return cls.from_json(fh.read())


def init_classifier(layer_dims: Sequence[int], activation: str = "relu",
                    seed: int | np.random.Generator = 0) -> Classifier:
    """Fan-in scaled uniform init, zero biases."""
    if len(layer_dims) < 2:
        raise ValueError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Classifier(weights, biases, activation)


def _as_batch(f: Classifier, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x.reshape(x.shape[0], -1)
    if X.shape[1] != f.n_inputs:
        raise ValueError(f"input has {X.shape[1]} features, classifier expects {f.n_inputs}")
    return X, single


def _forward_cache(f: Classifier, X: np.ndarray):
    pre, post = [], [X]
    a = X
    for W, b in zip(f.weights[:-1], f.biases[:-1]):
        z = a @ W + b
        a = _act(f.activation, z)
        pre.append(z)
        post.append(a)
    logits = a @ f.weights[-1] + f.biases[-1]
    return logits, pre, post


def forward_logits(f: Classifier, x) -> np.ndarray:
    """Logits for one sample ``(n,)`` or a batch ``(B, n)``."""
    X, single = _as_batch(f, x)
    logits = _forward_cache(f, X)[0]
    return logits[0] if single else logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def posterior(f: Classifier, x) -> np.ndarray:
    return softmax(forward_logits(f, x))


def penultimate_features(f: Classifier, x) -> np.ndarray:
    """Activations of the last hidden layer."""
    if len(f.weights) < 2:
        raise ValueError("classifier has no hidden layer")
    X, single = _as_batch(f, x)
    z = _forward_cache(f, X)[2][-1]
    return z[0] if single else z


# -- loss specs on logits -------------------------------------------------------

def _targets(target, B: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(target, dtype=np.intp), (B,))


def neg_log_posterior(target) -> LossSpec:
    """``-log p(target | x)``; ``target`` is an int or one label per row."""
    def spec(logits):
        B = logits.shape[0]
        t = _targets(target, B)
        lsm = log_softmax(logits)
        grad = np.exp(lsm)
        grad[np.arange(B), t] -= 1.0
        return -lsm[np.arange(B), t], grad
    return spec


def targeted_margin(target, kappa: float = 0.0) -> LossSpec:
    """``max(max_{j != t} h_j - h_t, -kappa)``: pushes samples into class ``t``."""
    def spec(logits):
        B = logits.shape[0]
        t = _targets(target, B)
        rows = np.arange(B)
        others = logits.copy()
        others[rows, t] = -np.inf
        j = np.argmax(others, axis=1)
        raw = logits[rows, j] - logits[rows, t]
        active = raw > -kappa
        grad = np.zeros_like(logits)
        grad[rows[active], j[active]] = 1.0
        grad[rows[active], t[active]] = -1.0
        return np.maximum(raw, -kappa), grad
    return spec


def untargeted_margin(label, kappa: float = 0.0) -> LossSpec:
    """``max(h_i - max_{j != i} h_j, -kappa)``: pushes samples out of class ``i``."""
    inner = targeted_margin(label, kappa=np.inf)

    def spec(logits):
        raw, grad = inner(logits)
        # targeted_margin(i) returns max_j h_j - h_i, i.e. minus the quantity we want
        raw, grad = -raw, -grad
        active = raw > -kappa
        grad[~active] = 0.0
        return np.maximum(raw, -kappa), grad
    return spec


def constant_loss(value: float = 0.0) -> LossSpec:
    def spec(logits):
        return np.full(logits.shape[0], float(value)), np.zeros_like(logits)
    return spec


def logits_and_input_gradient(f: Classifier, X: np.ndarray, loss: LossSpec):
    """Batched ``(logits, loss values, d loss / d X)`` in a single forward/backward pass."""
    logits, pre, post = _forward_cache(f, X)
    values, delta = loss(logits)
    delta = np.asarray(delta, dtype=np.float64)
    for l in range(len(f.weights) - 1, -1, -1):
        delta = delta @ f.weights[l].T
        if l:
            delta = delta * _act_grad(f.activation, pre[l - 1], post[l])
    return logits, values, delta


def input_gradient(f: Classifier, x, loss: LossSpec, return_value: bool = False):
    """Gradient of a scalar logit loss with respect to the input.

    For a batch, row ``b`` of the result is the gradient of loss value ``b``
    with respect to ``x[b]`` (samples do not interact). ReLU kinks use the
    derivative 0 at 0.
    """
    X, single = _as_batch(f, x)
    _, values, grad = logits_and_input_gradient(f, X, loss)
    if single:
        grad, values = grad[0], values[0]
    return (grad, values) if return_value else grad


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    optimizer: str = "adam"
    seed: int = 0
    activation: str = "relu"
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class _Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _param_grads(f: Classifier, X: np.ndarray, y: np.ndarray):
    logits, pre, post = _forward_cache(f, X)
    values, delta = neg_log_posterior(y)(logits)
    delta = delta / X.shape[0]
    gW, gb = [None] * len(f.weights), [None] * len(f.weights)
    for l in range(len(f.weights) - 1, -1, -1):
        gW[l] = post[l].T @ delta
        gb[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ f.weights[l].T) * _act_grad(f.activation, pre[l - 1], post[l])
    return float(values.mean()), gW, gb


def mean_cross_entropy(f: Classifier, X, y) -> float:
    X, _ = _as_batch(f, X)
    return float(neg_log_posterior(np.asarray(y))(forward_logits(f, X))[0].mean())


def train(X, y, layer_dims: Sequence[int], cfg: TrainConfig,
          init: Classifier | None = None) -> Classifier:
    """Mini-batch training on mean cross-entropy.

    Reproducible for a fixed ``cfg.seed``: the same seed drives the weight
    init and the per-epoch shuffles.
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    y = np.asarray(y, dtype=np.intp)
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("need a nonempty dataset with one label per sample")
    if cfg.batch_size > len(X):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(X)}")
    if y.min() < 0 or y.max() >= layer_dims[-1]:
        raise ValueError("labels must lie in 0..K-1")
    rng = np.random.default_rng(cfg.seed)
    f = init.copy() if init is not None else init_classifier(layer_dims, cfg.activation, rng)
    if f.layer_dims != list(layer_dims):
        raise ValueError("init classifier does not match layer_dims")
    params = f.weights + f.biases
    adam = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gW, gb = _param_grads(f, X[idx], y[idx])
            if cfg.weight_decay:
                gW = [g + cfg.weight_decay * W for g, W in zip(gW, f.weights)]
            total += loss * len(idx)
            if adam is not None:
                adam.step(params, gW + gb)
            else:
                for p, g in zip(params, gW + gb):
                    p -= cfg.learning_rate * g
        mean_loss = total / len(X)
        if not np.isfinite(mean_loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingError(epoch, mean_loss)
    return f


def accuracy(f: Classifier, X, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(f.predict(np.asarray(X)) == y))
