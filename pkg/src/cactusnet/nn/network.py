"""Networks: ordered layer stacks with snapshot semantics.

A ``Network`` is immutable once built.  Training steps return a new
snapshot that shares the parameter arrays of untouched (e.g. frozen)
layers, so concurrent readers of an old snapshot are always safe.
"""

from dataclasses import dataclass
from math import prod, sqrt

import numpy as np

from ..errors import (NumericFailureError, ShapeMismatchError,
                      UnsupportedArchitectureError)
from ..seeding import rng_for
from . import layers as L
from .layers import LayerSpec

LOSS_KINDS = ("CrossEntropy", "MSE")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def with_seed(self, seed: int) -> "TrainConfig":
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, seed)


def output_shapes(specs, input_shape):
    """Per-layer output shapes for a conforming input of ``input_shape``."""
    shapes = []
    cur = tuple(input_shape)
    for i, spec in enumerate(specs):
        if spec.kind == "Conv2D":
            _want_rank(cur, 3, i, spec)
            h, w, c = cur
            kh, kw = spec.kernel
            ho = (h - kh) // spec.stride + 1
            wo = (w - kw) // spec.stride + 1
            if kh > h or kw > w:
                raise ShapeMismatchError(
                    f"layer {i}: kernel {spec.kernel} exceeds input {cur}")
            cur = (ho, wo, spec.filters)
        elif spec.kind == "MaxPool2D":
            _want_rank(cur, 3, i, spec)
            h, w, c = cur
            kh, kw = spec.kernel
            if kh > h or kw > w:
                raise ShapeMismatchError(
                    f"layer {i}: pool window {spec.kernel} exceeds input {cur}")
            cur = ((h - kh) // spec.stride + 1, (w - kw) // spec.stride + 1, c)
        elif spec.kind == "Flatten":
            cur = (prod(cur),)
        elif spec.kind == "Dense":
            _want_rank(cur, 1, i, spec)
            cur = (spec.units,)
        elif spec.kind == "Softmax":
            _want_rank(cur, 1, i, spec)
        # ReLU keeps the shape
        shapes.append(cur)
    return shapes


def _want_rank(shape, rank, index, spec):
    if len(shape) != rank:
        raise ShapeMismatchError(
            f"layer {index} ({spec.kind}) expects rank-{rank} input, "
            f"got shape {shape}")


def _init_params(spec, in_shape, rng, dtype):
    """Glorot-uniform weights, zero biases."""
    if spec.kind == "Conv2D":
        kh, kw = spec.kernel
        c_in = in_shape[2]
        fan_in, fan_out = kh * kw * c_in, kh * kw * spec.filters
        shape = (kh, kw, c_in, spec.filters)
        b = np.zeros(spec.filters, dtype=dtype)
    else:  # Dense
        fan_in, fan_out = in_shape[0], spec.units
        shape = (in_shape[0], spec.units)
        b = np.zeros(spec.units, dtype=dtype)
    s = sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-s, s, size=shape).astype(dtype)
    return {"W": w, "b": b}


class Network:
    """Ordered layer stack with per-layer parameters and freeze flags."""

    def __init__(self, specs, input_shape, params):
        self.specs = tuple(specs)
        self.input_shape = tuple(input_shape)
        self.params = tuple(params)
        self.shapes = output_shapes(self.specs, self.input_shape)

    @classmethod
    def build(cls, specs, input_shape, seed, dtype=np.float32):
        """Initialize a network deterministically from ``seed``."""
        specs = tuple(specs)
        shapes = output_shapes(specs, input_shape)
        rng = rng_for(seed)
        params = []
        for i, spec in enumerate(specs):
            if spec.parameterized:
                in_shape = tuple(input_shape) if i == 0 else shapes[i - 1]
                params.append(_init_params(spec, in_shape, rng, dtype))
            else:
                params.append(None)
        return cls(specs, input_shape, params)

    # -- small accessors ----------------------------------------------
    @property
    def layer_count(self) -> int:
        return len(self.specs)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def param_layers(self):
        return [i for i, s in enumerate(self.specs) if s.parameterized]

    def unfrozen_param_layers(self):
        return [i for i, s in enumerate(self.specs)
                if s.parameterized and not s.frozen]

    def astype(self, dtype) -> "Network":
        params = [None if p is None else
                  {k: v.astype(dtype) for k, v in p.items()}
                  for p in self.params]
        return Network(self.specs, self.input_shape, params)

    def with_params(self, params) -> "Network":
        return Network(self.specs, self.input_shape, params)

    def _normalize_batch(self, batch):
        x = np.asarray(batch)
        if x.shape == self.input_shape:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatchError(
                f"batch shape {np.asarray(batch).shape} does not conform to "
                f"network input {self.input_shape}")
        return x


def forward(net: Network, batch) -> list:
    """Run the batch through every layer; returns one activation per layer.

    The final entry is the network output.  A single un-batched input is
    promoted to a batch of one.
    """
    x = net._normalize_batch(batch)
    trace = []
    for i, spec in enumerate(net.specs):
        x = _forward_one(spec, net.params[i], x)[0]
        if not np.isfinite(x).all():
            raise NumericFailureError(
                f"non-finite activation at layer {i} ({spec.kind})",
                layer_index=i)
        trace.append(x)
    return trace


def predict(net: Network, batch):
    """Network output for a batch (last entry of the forward trace)."""
    return forward(net, batch)[-1]


def _forward_one(spec, params, x):
    """Forward one layer; returns (output, cache-for-backward)."""
    if spec.kind == "Conv2D":
        return L.conv2d(x, params["W"], spec.stride) + params["b"], None
    if spec.kind == "MaxPool2D":
        out, idx = L.maxpool2d(x, spec.kernel, spec.stride)
        return out, idx
    if spec.kind == "Dense":
        return L.dense(x, params["W"], params["b"]), None
    if spec.kind == "ReLU":
        return L.relu(x), None
    if spec.kind == "Softmax":
        return L.softmax(x), None
    if spec.kind == "Flatten":
        return x.reshape(x.shape[0], -1), None
    raise AssertionError(spec.kind)


def _loss_and_delta(net, output, targets, loss_kind):
    t = np.asarray(targets)
    if t.shape != output.shape:
        raise ShapeMismatchError(
            f"targets {t.shape} do not match output {output.shape}")
    n = output.shape[0]
    if loss_kind == "MSE":
        diff = output - t
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        return loss, (2.0 / diff.size) * diff, False
    if loss_kind == "CrossEntropy":
        p = np.clip(output, 1e-12, None)
        loss = float(-np.mean(np.sum(t * np.log(p.astype(np.float64)), axis=1)))
        if net.specs[-1].kind == "Softmax":
            # fused softmax + cross-entropy gradient at the softmax input
            return loss, (output - t) / n, True
        return loss, -(t / p) / n, False
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def backward(net: Network, batch, targets, loss_kind="CrossEntropy"):
    """Loss and parameter gradients for unfrozen layers.

    Returns ``(grads, loss)`` where ``grads`` maps layer index to
    ``{"W": ..., "b": ...}``.  Backpropagation stops as soon as no
    unfrozen parameterized layer remains below the current depth.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    x = net._normalize_batch(batch)
    inputs, caches = [], []
    for i, spec in enumerate(net.specs):
        inputs.append(x)
        x, cache = _forward_one(spec, net.params[i], x)
        caches.append(cache)
    output = x

    loss, delta, fused = _loss_and_delta(net, output, targets, loss_kind)
    if not np.isfinite(loss):
        raise NumericFailureError("non-finite loss", layer_index=net.layer_count - 1)

    unfrozen = net.unfrozen_param_layers()
    grads = {}
    if not unfrozen:
        return grads, loss
    lowest = min(unfrozen)

    start = net.layer_count - 1
    if fused:
        start -= 1  # delta already sits at the softmax input
    for i in range(start, -1, -1):
        spec = net.specs[i]
        need_dx = i > lowest
        if spec.kind == "Conv2D":
            if spec.frozen:
                if need_dx:
                    delta, _ = L.conv2d_backward(
                        inputs[i], net.params[i]["W"], delta, spec.stride)
            else:
                dx, dw = L.conv2d_backward(
                    inputs[i], net.params[i]["W"], delta, spec.stride, need_dx)
                grads[i] = {"W": dw, "b": delta.sum(axis=(0, 1, 2))}
                delta = dx
        elif spec.kind == "Dense":
            dx, dw, db = L.dense_backward(inputs[i], net.params[i]["W"], delta)
            if not spec.frozen:
                grads[i] = {"W": dw, "b": db}
            delta = dx
        elif spec.kind == "MaxPool2D":
            delta = L.maxpool2d_backward(
                inputs[i].shape, caches[i], delta, spec.kernel, spec.stride)
        elif spec.kind == "ReLU":
            delta = L.relu_backward(inputs[i], delta)
        elif spec.kind == "Softmax":
            delta = L.softmax_backward(L.softmax(inputs[i]), delta)
        elif spec.kind == "Flatten":
            delta = delta.reshape(inputs[i].shape)
        if i in grads:
            for g in grads[i].values():
                if not np.isfinite(g).all():
                    raise NumericFailureError(
                        f"non-finite gradient at layer {i} ({spec.kind})",
                        layer_index=i)
        if i == lowest:
            break
        if delta is not None and not np.isfinite(delta).all():
            raise NumericFailureError(
                f"non-finite delta below layer {i} ({spec.kind})", layer_index=i)
    return grads, loss


def sgd_step(net: Network, grads, cfg) -> Network:
    """One plain-SGD update; frozen layers are carried over untouched."""
    lr = cfg.learning_rate if hasattr(cfg, "learning_rate") else float(cfg)
    new_params = list(net.params)
    for i in net.unfrozen_param_layers():
        if i not in grads:
            continue
        p, g = net.params[i], grads[i]
        for key in ("W", "b"):
            if g[key].shape != p[key].shape:
                raise ShapeMismatchError(
                    f"gradient {g[key].shape} does not match parameter "
                    f"{p[key].shape} at layer {i}")
        new_params[i] = {k: p[k] - lr * g[k] for k in ("W", "b")}
    return net.with_params(new_params)


def freeze_through(net: Network, layer_index: int) -> Network:
    """Freeze every parameterized layer at index <= ``layer_index``."""
    specs = [s.with_frozen(True) if s.parameterized and i <= layer_index
             else s for i, s in enumerate(net.specs)]
    return Network(specs, net.input_shape, net.params)


def split_at(net: Network, layer_index: int):
    """Split into (layers[0..i], layers[i+1..]) as two networks.

    Useful for training only the suffix of a partially frozen network:
    the prefix output can be computed once and reused, which changes no
    arithmetic because frozen layers never move.
    """
    if not 0 <= layer_index < net.layer_count - 1:
        raise ShapeMismatchError(
            f"cannot split a {net.layer_count}-layer network at {layer_index}")
    prefix = Network(net.specs[:layer_index + 1], net.input_shape,
                     net.params[:layer_index + 1])
    suffix = Network(net.specs[layer_index + 1:], net.shapes[layer_index],
                     net.params[layer_index + 1:])
    return prefix, suffix


def replace_head(net: Network, num_outputs: int, seed: int) -> Network:
    """Swap the final Dense block for a fresh one of width ``num_outputs``.

    The final layer must be Dense, optionally followed by Softmax; every
    earlier parameter tensor is carried over unchanged.
    """
    idx = net.layer_count - 1
    if net.specs[idx].kind == "Softmax":
        idx -= 1
    if idx < 0 or net.specs[idx].kind != "Dense":
        raise UnsupportedArchitectureError(
            "replace_head needs a final Dense layer (optionally + Softmax), "
            f"got {[s.kind for s in net.specs]}")
    in_shape = net.shapes[idx - 1] if idx > 0 else net.input_shape
    dtype = net.params[idx]["W"].dtype
    new_spec = LayerSpec.dense(num_outputs)
    specs = list(net.specs)
    specs[idx] = new_spec
    params = list(net.params)
    params[idx] = _init_params(new_spec, in_shape, rng_for(seed), dtype)
    return Network(specs, net.input_shape, params)


# ---------------------------------------------------------------------
# Training helpers
# ---------------------------------------------------------------------

def one_hot(labels, width):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], width), dtype=np.float32)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def accuracy(net: Network, images, labels) -> float:
    pred = predict(net, images).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def train_classifier(net: Network, images, labels, cfg: TrainConfig):
    """Minibatch SGD with cross-entropy; deterministic given ``cfg.seed``.

    Returns the trained snapshot and per-epoch ``(loss, accuracy)`` rows.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    width = net.output_shape[0]
    targets = one_hot(labels, width)
    rng = rng_for(cfg.seed)
    history = []
    n = images.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            grads, loss = backward(net, images[sel], targets[sel], "CrossEntropy")
            net = sgd_step(net, grads, cfg)
            losses.append(loss)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "accuracy": accuracy(net, images, labels)})
    return net, history
