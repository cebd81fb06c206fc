"""Dense feedforward networks with explicit traces and reverse-mode gradients.

Everything runs in 64-bit floats on numpy. A net is a plain list of
(weight, bias, activation) layers; forward passes return every
post-activation vector so downstream code can read intermediate features,
and the backward pass produces parameter gradients plus the gradient with
respect to the input (needed by every counterfactual solver).

Convention: the relu subgradient at exactly 0 is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
ROLES = ("blackbox", "generator", "encoder", "decoder", "discriminator")


class ShapeError(ValueError):
    """Dimension mismatch, naming the offending layer."""


class TrainingError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _apply_activation(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        # clip keeps exp() finite; sigmoid saturates well before +-40 anyway
        return 1.0 / (1.0 + np.exp(-np.clip(z, -40.0, 40.0)))
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad_from_output(y: np.ndarray, kind: str) -> np.ndarray:
    # All four activations have derivatives expressible from the output
    # alone, so traces only need to keep post-activation values.
    if kind == "relu":
        return (y > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "identity":
        return np.ones_like(y)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.weight = _as_f64(self.weight)
        self.bias = _as_f64(self.bias)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("layer weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class DenseNet:
    """An ordered stack of dense layers plus a role tag and free-form metadata."""

    layers: list[Layer]
    role: str = "blackbox"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a net needs at least one layer")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        self.validate()

    def validate(self) -> None:
        for i in range(1, len(self.layers)):
            if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} expects input {self.layers[i].in_dim}, "
                    f"layer {i - 1} produces {self.layers[i - 1].out_dim}"
                )
        for i, layer in enumerate(self.layers):
            if not (np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all()):
                raise ValueError(f"layer {i} has non-finite parameters")
        if self.role == "blackbox" and self.layers[-1].activation != "identity":
            raise ValueError("a blackbox net must end in an identity (linear) head")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def layer_dims(self) -> list[int]:
        return [self.in_dim] + [l.out_dim for l in self.layers]

    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    # Classifier slices. Layer objects are shared, not copied: mutating the
    # original net is visible through the slice.
    def head(self) -> "DenseNet":
        return DenseNet([self.layers[-1]], role="blackbox", meta={"slice": "head"})

    def feature_extractor(self) -> "DenseNet":
        if len(self.layers) < 2:
            raise ShapeError("cannot split a single-layer net into extractor + head")
        return DenseNet(self.layers[:-1], role="encoder", meta={"slice": "features"})

    @property
    def feature_dim(self) -> int:
        if len(self.layers) < 2:
            raise ShapeError("single-layer net has no feature layer")
        return self.layers[-2].out_dim


@dataclass
class ActivationTrace:
    """Post-activation vector of every layer for one input; last entry is the output."""

    activations: list[np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def features(self) -> np.ndarray:
        """Penultimate activations (the feature space of a classifier)."""
        if len(self.activations) < 2:
            raise ShapeError("trace has no penultimate layer")
        return self.activations[-2]


@dataclass
class GradientBundle:
    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    input_grad: np.ndarray | None = None


def forward_with_trace(net: DenseNet, x) -> ActivationTrace:
    """Run one input through the net, keeping every post-activation vector."""
    x = _as_f64(x)
    if x.ndim != 1 or x.shape[0] != net.in_dim:
        raise ShapeError(f"layer 0 expects input of length {net.in_dim}, got shape {x.shape}")
    acts: list[np.ndarray] = []
    h = x
    for layer in net.layers:
        h = _apply_activation(layer.weight @ h + layer.bias, layer.activation)
        acts.append(h)
    return ActivationTrace(acts)


def forward_batch(net: DenseNet, X) -> list[np.ndarray]:
    """Batched forward pass; returns per-layer (n, width) post-activations."""
    X = _as_f64(X)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ShapeError(f"layer 0 expects batch of width {net.in_dim}, got shape {X.shape}")
    acts = []
    H = X
    for layer in net.layers:
        H = _apply_activation(H @ layer.weight.T + layer.bias, layer.activation)
        acts.append(H)
    return acts


def output_batch(net: DenseNet, X) -> np.ndarray:
    return forward_batch(net, X)[-1]


def backprop(net: DenseNet, x, trace: ActivationTrace, grad_out) -> GradientBundle:
    """Reverse accumulation from d(loss)/d(output) to parameter and input grads."""
    x = _as_f64(x)
    delta = _as_f64(grad_out)
    wgrads: list[np.ndarray] = [None] * net.depth  # type: ignore[list-item]
    bgrads: list[np.ndarray] = [None] * net.depth  # type: ignore[list-item]
    for i in range(net.depth - 1, -1, -1):
        layer = net.layers[i]
        delta = delta * _activation_grad_from_output(trace.activations[i], layer.activation)
        prev = trace.activations[i - 1] if i > 0 else x
        wgrads[i] = np.outer(delta, prev)
        bgrads[i] = delta.copy()
        delta = layer.weight.T @ delta
    return GradientBundle(wgrads, bgrads, input_grad=delta)


def backprop_batch(
    net: DenseNet, X, acts: list[np.ndarray], grad_out
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Batch version of backprop; parameter grads are summed over the batch."""
    X = _as_f64(X)
    delta = _as_f64(grad_out)
    wgrads: list[np.ndarray] = [None] * net.depth  # type: ignore[list-item]
    bgrads: list[np.ndarray] = [None] * net.depth  # type: ignore[list-item]
    for i in range(net.depth - 1, -1, -1):
        layer = net.layers[i]
        delta = delta * _activation_grad_from_output(acts[i], layer.activation)
        prev = acts[i - 1] if i > 0 else X
        wgrads[i] = delta.T @ prev
        bgrads[i] = delta.sum(axis=0)
        delta = delta @ layer.weight
    return wgrads, bgrads, delta


def backprop_input_only(net: DenseNet, trace: ActivationTrace, grad_out) -> np.ndarray:
    """Input gradient alone, skipping the parameter-gradient outer products.

    The counterfactual solvers call this in their inner loops, where the
    parameters are frozen and only d(loss)/d(input) matters.
    """
    delta = _as_f64(grad_out)
    for i in range(net.depth - 1, -1, -1):
        layer = net.layers[i]
        delta = delta * _activation_grad_from_output(trace.activations[i], layer.activation)
        delta = layer.weight.T @ delta
    return delta


def input_gradient(net: DenseNet, x, loss: Callable[[np.ndarray], tuple[float, np.ndarray]]) -> np.ndarray:
    """Gradient of a scalar loss on the net output with respect to the input.

    ``loss`` maps the output vector to ``(value, d value / d output)``; the
    composite counterfactual objectives build their own closures on top.
    """
    trace = forward_with_trace(net, x)
    _, grad_out = loss(trace.logits)
    return backprop(net, x, trace, grad_out).input_grad


# ---------------------------------------------------------------------------
# losses (batched, for training)

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    p = softmax(logits)
    idx = (np.arange(n), labels)
    loss = float(-np.mean(np.log(np.maximum(p[idx], 1e-300))))
    grad = p
    grad[idx] -= 1.0
    return loss, grad / n


def mse_loss(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    diff = outputs - targets
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def bce_with_logits(logits: np.ndarray, target: float) -> tuple[float, np.ndarray]:
    """Binary cross entropy on raw logits against a constant target in [0,1]."""
    l = logits
    loss = float(np.mean(np.maximum(l, 0.0) - l * target + np.log1p(np.exp(-np.abs(l)))))
    sig = 1.0 / (1.0 + np.exp(-np.clip(l, -40.0, 40.0)))
    return loss, (sig - target) / l.size


def cross_entropy_to(target: int) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Single-vector cross entropy toward a fixed class, for input_gradient."""

    def loss(logits: np.ndarray) -> tuple[float, np.ndarray]:
        p = softmax(logits[None, :])[0]
        return float(-np.log(max(p[target], 1e-300))), p - np.eye(len(p))[target]

    return loss


# ---------------------------------------------------------------------------
# optimizers

class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def apply(self, net: DenseNet, wgrads, bgrads) -> None:
        for layer, gw, gb in zip(net.layers, wgrads, bgrads):
            layer.weight -= self.lr * gw
            layer.bias -= self.lr * gb


class Adam:
    """Adam over a net's parameters (defaults 0.9 / 0.999 / 1e-8)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._slots: list[tuple[np.ndarray, ...]] | None = None

    def _ensure(self, net: DenseNet) -> None:
        if self._slots is None:
            self._slots = [
                (
                    np.zeros_like(l.weight),
                    np.zeros_like(l.weight),
                    np.zeros_like(l.bias),
                    np.zeros_like(l.bias),
                )
                for l in net.layers
            ]

    def apply(self, net: DenseNet, wgrads, bgrads) -> None:
        self._ensure(net)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for layer, slot, gw, gb in zip(net.layers, self._slots, wgrads, bgrads):
            mw, vw, mb, vb = slot
            mw *= self.beta1
            mw += (1 - self.beta1) * gw
            vw *= self.beta2
            vw += (1 - self.beta2) * gw * gw
            layer.weight -= self.lr * (mw / c1) / (np.sqrt(vw / c2) + self.eps)
            mb *= self.beta1
            mb += (1 - self.beta1) * gb
            vb *= self.beta2
            vb += (1 - self.beta2) * gb * gb
            layer.bias -= self.lr * (mb / c1) / (np.sqrt(vb / c2) + self.eps)


class VectorAdam:
    """Adam on a single flat vector; used by every counterfactual solver."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'sgd' or 'adam')")


def train_step(net: DenseNet, X, objective, optimizer) -> float:
    """One optimizer step on a batch.

    ``objective`` maps the batched net output to ``(scalar loss, d loss / d output)``.
    Mutates the net in place and returns the loss; aborts on non-finite loss.
    """
    X = _as_f64(X)
    acts = forward_batch(net, X)
    loss, grad_out = objective(acts[-1])
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite training loss: {loss!r}")
    wgrads, bgrads, _ = backprop_batch(net, X, acts, grad_out)
    optimizer.apply(net, wgrads, bgrads)
    return loss


# ---------------------------------------------------------------------------
# initialization and gradient checking

def init_dense_net(
    dims: Sequence[int],
    activations: Sequence[str],
    rng: np.random.Generator,
    role: str = "blackbox",
) -> DenseNet:
    """He-style init for relu layers, Xavier for the rest."""
    if len(activations) != len(dims) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        if act == "relu":
            scale = np.sqrt(2.0 / fan_in)
        else:
            scale = np.sqrt(1.0 / fan_in)
        w = rng.standard_normal((fan_out, fan_in)) * scale
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers, role=role)


@dataclass
class GradCheckReport:
    max_rel_error_params: float
    max_rel_error_input: float
    tolerance: float
    skipped_kinks: int = 0  # coordinates whose probe interval crossed a relu kink

    @property
    def passed(self) -> bool:
        return max(self.max_rel_error_params, self.max_rel_error_input) < self.tolerance


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def check_gradients(
    net: DenseNet,
    tolerance: float = 1e-4,
    rng: np.random.Generator | None = None,
    x: np.ndarray | None = None,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Report-only: nothing raises on failure. Intended for small nets (the
    finite differencing is O(parameters) forward passes). Coordinates whose
    +-h probes land in different relu activation patterns straddle a kink,
    where a central difference says nothing about the subgradient; they are
    skipped and counted instead of compared.
    """
    if net.n_params() > 10_000:
        raise ValueError("gradient check is only tractable for nets with <=1e4 parameters")
    rng = rng or np.random.default_rng(0)
    if x is None:
        x = rng.standard_normal(net.in_dim)
    x = _as_f64(x)
    y0 = rng.standard_normal(net.out_dim)
    relu_idx = [i for i, layer in enumerate(net.layers) if layer.activation == "relu"]

    def probe(xv) -> tuple[float, tuple]:
        t = forward_with_trace(net, xv)
        mask = tuple((t.activations[i] > 0).tobytes() for i in relu_idx)
        return 0.5 * float(np.sum((t.logits - y0) ** 2)), mask

    trace = forward_with_trace(net, x)
    bundle = backprop(net, x, trace, trace.logits - y0)

    worst_p = 0.0
    skipped = 0
    for li, layer in enumerate(net.layers):
        for arr, grads in ((layer.weight, bundle.weight_grads[li]), (layer.bias, bundle.bias_grads[li])):
            flat = arr.reshape(-1)
            gflat = grads.reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + h
                up, up_mask = probe(x)
                flat[j] = keep - h
                dn, dn_mask = probe(x)
                flat[j] = keep
                if up_mask != dn_mask:
                    skipped += 1
                    continue
                worst_p = max(worst_p, _rel_err(gflat[j], (up - dn) / (2 * h)))

    worst_x = 0.0
    for j in range(x.size):
        keep = x[j]
        x[j] = keep + h
        up, up_mask = probe(x)
        x[j] = keep - h
        dn, dn_mask = probe(x)
        x[j] = keep
        if up_mask != dn_mask:
            skipped += 1
            continue
        worst_x = max(worst_x, _rel_err(bundle.input_grad[j], (up - dn) / (2 * h)))

    return GradCheckReport(worst_p, worst_x, tolerance, skipped)
