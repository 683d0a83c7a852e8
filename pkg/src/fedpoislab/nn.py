"""Minimal dense networks with manual backprop.

Everything downstream (federated clients, the denoiser, the defenses) works
on these networks or on their flattened parameter vectors. All math is
float64 and plain SGD, which keeps gradient checks tight and makes the
step-linearity property hold exactly.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError

ACTIVATIONS = ("relu", "identity")
OUTPUT_HEADS = ("softmax-crossentropy", "linear-mse")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: layer sizes, hidden activations, and the loss head.

    ``activation`` may be a single name applied to every hidden layer or a
    tuple with one name per hidden layer.
    """

    layer_sizes: tuple
    activation: tuple = "relu"
    output_head: str = "softmax-crossentropy"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise InputError("layer_sizes needs at least input and output sizes")
        if any(s < 1 for s in sizes):
            raise InputError(f"layer sizes must be >= 1, got {sizes}")
        n_hidden = len(sizes) - 2
        act = self.activation
        if isinstance(act, str):
            act = (act,) * n_hidden
        act = tuple(act)
        if len(act) != n_hidden:
            raise InputError(f"need {n_hidden} hidden activations, got {len(act)}")
        for a in act:
            if a not in ACTIVATIONS:
                raise InputError(f"unknown activation {a!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise InputError(f"unknown output head {self.output_head!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", act)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class LayoutEntry:
    """One parameter block in a flat vector: (layer index, weight|bias, shape)."""

    layer: int
    kind: str
    shape: tuple

    @property
    def count(self) -> int:
        return int(np.prod(self.shape))


def spec_layout(spec: NetworkSpec) -> tuple:
    """Flat layout for a spec: per layer, weight block then bias block."""
    entries = []
    for l in range(spec.n_layers):
        fan_in, fan_out = spec.layer_sizes[l], spec.layer_sizes[l + 1]
        entries.append(LayoutEntry(l, "weight", (fan_in, fan_out)))
        entries.append(LayoutEntry(l, "bias", (fan_out,)))
    return tuple(entries)


@dataclass(frozen=True)
class Network:
    """Immutable parameter container; training returns new networks."""

    spec: NetworkSpec
    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise InputError("wrong number of parameter blocks for spec")
        for l in range(self.spec.n_layers):
            fan_in, fan_out = self.spec.layer_sizes[l], self.spec.layer_sizes[l + 1]
            if self.weights[l].shape != (fan_in, fan_out):
                raise InputError(f"layer {l} weight shape {self.weights[l].shape} != {(fan_in, fan_out)}")
            if self.biases[l].shape != (fan_out,):
                raise InputError(f"layer {l} bias shape {self.biases[l].shape} != {(fan_out,)}")
            if not (np.isfinite(self.weights[l]).all() and np.isfinite(self.biases[l]).all()):
                raise NumericError(f"non-finite parameters in layer {l}")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 view of all parameters plus the layout to rebuild them."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        expected = sum(e.count for e in self.layout)
        if values.ndim != 1 or values.size != expected:
            raise InputError(f"flat vector length {values.size} != layout total {expected}")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class GradientRecord:
    """Per-parameter loss gradients, mirroring a network's blocks."""

    d_weights: tuple
    d_biases: tuple


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """Glorot-uniform weights, zero biases, from an explicit seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(spec.n_layers):
        fan_in, fan_out = spec.layer_sizes[l], spec.layer_sizes[l + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(_frozen(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        biases.append(_frozen(np.zeros(fan_out)))
    return Network(spec, tuple(weights), tuple(biases))


def _apply_activation(z: np.ndarray, name: str) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _forward_cached(net: Network, batch: np.ndarray):
    """Forward pass keeping pre/post-activation caches for backprop."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.spec.input_size:
        raise InputError(f"batch shape {x.shape} incompatible with input size {net.spec.input_size}")
    acts = [x]
    pre = []
    h = x
    n_layers = net.spec.n_layers
    for l in range(n_layers):
        z = h @ net.weights[l] + net.biases[l]
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite pre-activation in layer {l}")
        pre.append(z)
        h = _apply_activation(z, net.spec.activation[l]) if l < n_layers - 1 else z
        acts.append(h)
    return acts, pre


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Logits (softmax head) or regression output (mse head) for a batch."""
    acts, _ = _forward_cached(net, batch)
    return acts[-1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(net: Network, batch: np.ndarray, targets) -> tuple:
    """Loss and full gradient for one batch.

    softmax-crossentropy: targets are integer class indices, loss is the mean
    negative log-likelihood. linear-mse: targets are a real matrix, loss is
    the mean squared error over all output entries.
    """
    acts, pre = _forward_cached(net, batch)
    out = acts[-1]
    n = out.shape[0]

    if net.spec.output_head == "softmax-crossentropy":
        y = np.asarray(targets)
        if y.shape != (n,):
            raise InputError(f"expected {n} class indices, got shape {y.shape}")
        probs = _softmax(out)
        loss = float(-np.log(probs[np.arange(n), y]).mean())
        d_out = probs.copy()
        d_out[np.arange(n), y] -= 1.0
        d_out /= n
    else:
        y = np.asarray(targets, dtype=np.float64)
        if y.shape != out.shape:
            raise InputError(f"target shape {y.shape} != output shape {out.shape}")
        diff = out - y
        loss = float((diff ** 2).mean())
        d_out = 2.0 * diff / diff.size

    if not np.isfinite(loss):
        raise NumericError("non-finite loss at output head")

    n_layers = net.spec.n_layers
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    delta = d_out
    for l in range(n_layers - 1, -1, -1):
        d_weights[l] = acts[l].T @ delta
        d_biases[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ net.weights[l].T
            if net.spec.activation[l - 1] == "relu":
                delta = delta * (pre[l - 1] > 0)
    return loss, GradientRecord(tuple(d_weights), tuple(d_biases))


def sgd_step(net: Network, grad: GradientRecord, lr: float) -> Network:
    """One plain gradient step; lr = 0 returns the parameters unchanged."""
    if lr < 0:
        raise InputError("learning rate must be >= 0")
    if len(grad.d_weights) != net.spec.n_layers:
        raise InputError("gradient layout does not match network")
    weights, biases = [], []
    for l in range(net.spec.n_layers):
        if grad.d_weights[l].shape != net.weights[l].shape:
            raise InputError(f"layer {l} gradient shape mismatch")
        weights.append(_frozen(net.weights[l] - lr * grad.d_weights[l]))
        biases.append(_frozen(net.biases[l] - lr * grad.d_biases[l]))
    return Network(net.spec, tuple(weights), tuple(biases))


def flatten(net: Network) -> ParamVector:
    """Layer order, weights before biases, row-major within each matrix."""
    parts = []
    for l in range(net.spec.n_layers):
        parts.append(net.weights[l].ravel())
        parts.append(net.biases[l].ravel())
    return ParamVector(np.concatenate(parts), spec_layout(net.spec))


def unflatten(pv: ParamVector, spec: NetworkSpec) -> Network:
    """Inverse of flatten; errors if the layout disagrees with the spec."""
    if pv.layout != spec_layout(spec):
        raise InputError("param vector layout does not match spec")
    weights, biases = [], []
    offset = 0
    for entry in pv.layout:
        block = pv.values[offset:offset + entry.count].reshape(entry.shape)
        offset += entry.count
        if entry.kind == "weight":
            weights.append(_frozen(block))
        else:
            biases.append(_frozen(block))
    return Network(spec, tuple(weights), tuple(biases))


def train_network(net: Network, features: np.ndarray, targets, epochs: int,
                  batch_size: int, lr: float, seed: int) -> Network:
    """Mini-batch SGD with seeded shuffling; returns the trained network."""
    from .seeding import spawn

    if epochs < 0:
        raise InputError("epochs must be >= 0")
    if batch_size < 1:
        raise InputError("batch size must be >= 1")
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    targets = np.asarray(targets)
    for epoch in range(epochs):
        order = spawn(seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, grad = loss_and_grad(net, x[idx], targets[idx])
            net = sgd_step(net, grad, lr)
    return net


def evaluate_accuracy(net: Network, features: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy of a softmax-head network."""
    logits = forward(net, features)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())
