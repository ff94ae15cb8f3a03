"""Parameter containers and forward passes for the four networks.

A single shared feature extractor feeds three heads: a log-softmax task
classifier trained on source labels, a sigmoid domain classifier predicting
source-vs-target, and a target classifier with the same shape as the task
head. Forward passes are pure; updates swap whole parameter tensors.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, add_rowvec, clip, log_softmax, matmul, relu, sigmoid

DOMAIN_EPS = 1e-7  # keeps domain probabilities away from log(0)
_MAGIC = b"DAF1"


class Layer:
    """One affine layer; `w` and `b` are immutable tensors swapped on update."""

    __slots__ = ("w", "b", "activation")

    def __init__(self, w, b, activation="linear"):
        if w.cols != b.cols or b.rows != 1:
            raise ShapeError(f"layer bias {b.shape} does not match weight {w.shape}")
        self.w = w
        self.b = b
        self.activation = activation


@dataclass
class MLPParams:
    """Stack of affine layers with per-layer activation ('relu' or 'linear')."""

    layers: list

    def parameters(self):
        out = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
        return out

    def clone(self):
        # Tensors are immutable, so sharing them across clones is safe.
        return MLPParams([Layer(l.w, l.b, l.activation) for l in self.layers])

    def dims(self):
        return [self.layers[0].w.rows] + [l.w.cols for l in self.layers]


@dataclass
class NetworkBundle:
    """The four parameter sets; `extractor` is the single shared copy."""

    extractor: MLPParams
    task_head: MLPParams
    domain_head: MLPParams
    target_head: MLPParams
    input_dim: int
    hidden: int
    feat_dim: int
    num_classes: int

    def clone(self):
        return NetworkBundle(
            self.extractor.clone(), self.task_head.clone(),
            self.domain_head.clone(), self.target_head.clone(),
            self.input_dim, self.hidden, self.feat_dim, self.num_classes,
        )

    def nbytes(self):
        return sum(p.data.nbytes for net in self.networks() for p in net.parameters())

    def networks(self):
        return (self.extractor, self.task_head, self.domain_head, self.target_head)


def init_mlp(dims, rng):
    """He-scaled normal weights (std = sqrt(2/fan_in)), zero biases."""
    layers = []
    last = len(dims) - 2
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = Tensor._wrap(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)), "init")
        b = Tensor._wrap(np.zeros((1, fan_out)), "init")
        layers.append(Layer(w, b, "relu" if i < last else "linear"))
    return MLPParams(layers)


def init_bundle(input_dim, feat_dim, hidden, num_classes, seed):
    """Deterministic bundle init; draw order is extractor, task, domain, target."""
    if min(input_dim, feat_dim, hidden, num_classes) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    extractor = init_mlp((input_dim, hidden, hidden, feat_dim), rng)
    task_head = init_mlp((feat_dim, hidden, num_classes), rng)
    domain_head = init_mlp((feat_dim, hidden, 1), rng)
    target_head = init_mlp((feat_dim, hidden, num_classes), rng)
    return NetworkBundle(extractor, task_head, domain_head, target_head,
                         input_dim, hidden, feat_dim, num_classes)


def forward_mlp(params, x, tape=None):
    h = x
    for layer in params.layers:
        h = add_rowvec(matmul(h, layer.w, tape), layer.b, tape)
        if layer.activation == "relu":
            h = relu(h, tape)
    return h


def forward_features(extractor, x, tape=None):
    """Map an input batch to feature rows."""
    return forward_mlp(extractor, x, tape)


def forward_task(task_head, features, tape=None):
    """Log-probabilities over classes, one row per feature row."""
    return log_softmax(forward_mlp(task_head, features, tape), tape)


def forward_target(target_head, features, tape=None):
    """Same contract as forward_task, through the target head."""
    return log_softmax(forward_mlp(target_head, features, tape), tape)


def forward_domain(domain_head, features, tape=None):
    """Probability that each feature row came from the target domain.

    Output is a batch x 1 column clamped into [DOMAIN_EPS, 1 - DOMAIN_EPS].
    """
    z = sigmoid(forward_mlp(domain_head, features, tape), tape)
    return clip(z, DOMAIN_EPS, 1.0 - DOMAIN_EPS, tape)


def save_bundle(bundle, path):
    """Flat binary: b'DAF1', four LE u32 dims, then LE f64 parameters.

    Parameters follow network order (extractor, task, domain, target); within
    each network, per layer, the weight matrix row-major then the bias row.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<4I", bundle.input_dim, bundle.hidden,
                             bundle.feat_dim, bundle.num_classes))
        for net in bundle.networks():
            for p in net.parameters():
                fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_bundle(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad bundle magic: expected {_MAGIC!r}, got {magic!r}")
        input_dim, hidden, feat_dim, num_classes = struct.unpack("<4I", fh.read(16))
        bundle = init_bundle(input_dim, feat_dim, hidden, num_classes, seed=0)
        for net in bundle.networks():
            for layer in net.layers:
                layer.w = _read_tensor(fh, layer.w.shape)
                layer.b = _read_tensor(fh, layer.b.shape)
        extra = fh.read(1)
    if extra:
        raise ValueError("trailing bytes after bundle payload")
    return bundle


def _read_tensor(fh, shape):
    n = shape[0] * shape[1] * 8
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("truncated bundle payload")
    return Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape))
