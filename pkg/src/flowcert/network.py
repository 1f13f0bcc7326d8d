"""Feed-forward ReLU classifiers, their flow-domain lift, and a trainer.

Networks are plain affine/ReLU chains with an argmax head (lowest index
wins ties). Because the first operation is affine, a network over
images can be rewritten into an equivalent one over flows: compose the
first layer with the flow application map for a fixed reference. The
rewritten network agrees with the original on every flow of an image,
so robustness questions transfer between the two domains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ModelFormatError, ShapeMismatchError
from .grid import Flow, FlowMatrix, GridImage, GridShape, build_flow_matrix

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Network:
    """Affine layers with ReLU between consecutive layers, none after
    the last. ``grid`` records the image grid the input dimension
    corresponds to, when there is one."""

    weights: tuple
    biases: tuple
    grid: Optional[GridShape] = None

    def __post_init__(self):
        weights = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        biases = tuple(np.asarray(b, dtype=np.float64).ravel() for b in self.biases)
        if not weights or len(weights) != len(biases):
            raise ShapeMismatchError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2:
                raise ShapeMismatchError(f"layer {i} weight must be 2-d")
            if w.shape[0] != b.size:
                raise ShapeMismatchError(
                    f"layer {i} bias length {b.size} does not match {w.shape[0]} rows"
                )
            if i and w.shape[1] != weights[i - 1].shape[0]:
                raise ShapeMismatchError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer emits "
                    f"{weights[i - 1].shape[0]}"
                )
        if self.grid is not None and self.grid.pixels != weights[0].shape[1]:
            raise ShapeMismatchError(
                f"grid {self.grid} has {self.grid.pixels} pixels, first layer expects "
                f"{weights[0].shape[1]}"
            )
        for w in weights:
            w.flags.writeable = False
        for b in biases:
            b.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class LiftedNetwork:
    """A network over flows, tied to the reference it was lifted with."""

    net: Network
    reference: GridImage

    @property
    def shape(self) -> GridShape:
        return self.reference.shape

    @property
    def class_count(self) -> int:
        return self.net.class_count


def forward(net, x) -> np.ndarray:
    """Logits for a single input vector."""
    if isinstance(net, LiftedNetwork):
        net = net.net
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size != net.input_dim:
        raise ShapeMismatchError(f"input has {a.size} entries, expected {net.input_dim}")
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = w @ a + b
        if i != last:
            a = np.maximum(a, 0.0)
    return a


def classify(net, x) -> int:
    """Argmax class, lowest index on ties."""
    return int(np.argmax(forward(net, x)))


def lift_network(
    net: Network, reference: GridImage, matrix: Optional[FlowMatrix] = None
) -> LiftedNetwork:
    """Rewrite the first layer so the network consumes flows.

    The new first layer is (W1 A, W1 R + b1); all later layers are
    shared. Only the bias depends on the reference.
    """
    if net.input_dim != reference.shape.pixels:
        raise ShapeMismatchError(
            f"network expects {net.input_dim} inputs, reference grid has "
            f"{reference.shape.pixels} pixels"
        )
    if matrix is None:
        matrix = build_flow_matrix(reference.shape)
    elif matrix.shape != reference.shape:
        raise ShapeMismatchError("flow matrix grid does not match the reference")
    w1, b1 = net.weights[0], net.biases[0]
    lifted_w1 = matrix.premultiply(w1)
    lifted_b1 = w1 @ reference.mass + b1
    inner = Network(
        weights=(lifted_w1,) + net.weights[1:],
        biases=(lifted_b1,) + net.biases[1:],
    )
    return LiftedNetwork(net=inner, reference=reference)


def margin_loss_and_grad(lifted: LiftedNetwork, delta: Flow, label: int) -> tuple[float, Flow]:
    """Margin to the strongest competitor and its input gradient.

    The loss is min over t != label of logit[label] - logit[t]; it is
    positive exactly when the flow is classified as ``label`` (up to
    ties). The gradient backpropagates through the fixed competitor
    (lowest index on ties); ReLU kinks use the inactive-side
    subgradient, i.e. zero.
    """
    net = lifted.net
    if delta.shape != lifted.shape:
        raise ShapeMismatchError("flow grid does not match the lifted network")
    if not 0 <= label < net.class_count:
        raise ValueError(f"label {label} out of range for {net.class_count} classes")

    a = delta.vec
    pre = []
    acts = [a]
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = w @ a + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i != last else z
        acts.append(a)
    logits = acts[-1]

    margins = logits[label] - logits
    margins[label] = np.inf
    competitor = int(np.argmin(margins))
    loss = float(margins[competitor])

    g = np.zeros(net.class_count)
    g[label] = 1.0
    g[competitor] = -1.0
    for i in range(last, -1, -1):
        if i != last:
            g = g * (pre[i] > 0.0)
        g = net.weights[i].T @ g
    return loss, Flow(delta.shape, g)


def save_model(net: Network, path) -> None:
    """Write the versioned JSON model file; floats round-trip exactly."""
    layers = [
        {
            "rows": int(w.shape[0]),
            "cols": int(w.shape[1]),
            "weights": w.ravel().tolist(),
            "bias": b.tolist(),
        }
        for w, b in zip(net.weights, net.biases)
    ]
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "shape": [net.grid.rows, net.grid.cols] if net.grid else None,
        "layers": layers,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path) -> Network:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}")
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: expected a JSON object at the top level")
    version = doc.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported model version {version!r} (supported: {MODEL_FORMAT_VERSION})"
        )
    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ModelFormatError(f"{path}: field 'layers' must be a non-empty list")
    weights, biases = [], []
    for idx, layer in enumerate(raw_layers):
        if not isinstance(layer, dict):
            raise ModelFormatError(f"{path}: layer {idx} is not an object")
        try:
            rows, cols = int(layer["rows"]), int(layer["cols"])
            w = np.asarray(layer["weights"], dtype=np.float64)
            b = np.asarray(layer["bias"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"{path}: layer {idx} malformed: {exc}")
        if w.size != rows * cols:
            raise ModelFormatError(
                f"{path}: layer {idx} has {w.size} weights, expected {rows}x{cols}"
            )
        if b.size != rows:
            raise ModelFormatError(f"{path}: layer {idx} has {b.size} biases, expected {rows}")
        weights.append(w.reshape(rows, cols))
        biases.append(b)
    shape = doc.get("shape")
    grid = None
    if shape is not None:
        try:
            grid = GridShape(int(shape[0]), int(shape[1]))
        except (TypeError, ValueError, IndexError) as exc:
            raise ModelFormatError(f"{path}: field 'shape' malformed: {exc}")
    try:
        return Network(weights=tuple(weights), biases=tuple(biases), grid=grid)
    except ShapeMismatchError as exc:
        raise ModelFormatError(f"{path}: inconsistent layer dimensions: {exc}")


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple = (64, 64)
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.25
    seed: int = 0


def train_small(dataset, config: Optional[TrainConfig] = None) -> Network:
    """Minibatch SGD with cross-entropy on raw (normalized) images.

    Deterministic for a fixed seed. Pixel masses are O(1/pixels), so
    training runs on inputs scaled by the pixel count and the scale is
    folded into the first layer afterwards; the returned network
    consumes mass vectors directly.
    """
    config = config or TrainConfig()
    images: Sequence[GridImage] = dataset.images
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(images) != labels.size:
        raise ShapeMismatchError("images and labels differ in length")
    grid = images[0].shape
    X = np.stack([img.mass for img in images]) * grid.pixels
    n_classes = int(labels.max()) + 1
    dims = [grid.pixels, *config.hidden, n_classes]

    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for i in range(len(dims) - 1):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i + 1], dims[i])))
        biases.append(np.zeros(dims[i + 1]))

    n = X.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = X[idx], labels[idx]
            # forward
            pre, acts = [], [xb]
            a = xb
            for li, (w, b) in enumerate(zip(weights, biases)):
                z = a @ w.T + b
                pre.append(z)
                a = np.maximum(z, 0.0) if li != len(weights) - 1 else z
                acts.append(a)
            logits = acts[-1]
            shifted = logits - logits.max(axis=1, keepdims=True)
            expz = np.exp(shifted)
            probs = expz / expz.sum(axis=1, keepdims=True)
            grad = probs
            grad[np.arange(len(idx)), yb] -= 1.0
            grad /= len(idx)
            # backward
            for li in range(len(weights) - 1, -1, -1):
                gw = grad.T @ acts[li]
                gb = grad.sum(axis=0)
                if li:
                    grad = (grad @ weights[li]) * (pre[li - 1] > 0.0)
                weights[li] = weights[li] - config.learning_rate * gw
                biases[li] = biases[li] - config.learning_rate * gb
    weights[0] = weights[0] * grid.pixels
    return Network(weights=tuple(weights), biases=tuple(biases), grid=grid)


def train_accuracy(net: Network, dataset) -> float:
    labels = np.asarray(dataset.labels, dtype=np.int64)
    hits = sum(
        classify(net, img.mass) == int(lbl) for img, lbl in zip(dataset.images, labels)
    )
    return hits / len(labels)
