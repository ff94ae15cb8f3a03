"""Loss and confidence formulas.

The domain head is read as the probability that a feature row came from the
target domain (0 = source, 1 = target); both adversarial objectives are
written in that convention. Confidence weights are plain values, never part
of the differentiated graph.
"""

from enum import Enum

import numpy as np

from .tensor import Tensor, ShapeError

__all__ = [
    "ConfidenceSource",
    "task_loss",
    "disc_loss",
    "feat_adv_loss",
    "weighted_pseudo_loss",
    "confidence_domain",
    "confidence_task",
    "instance_weight",
    "pseudo_labels",
]


class ConfidenceSource(str, Enum):
    """Where a pseudo-label or instance weight comes from."""

    TASK_SOFTMAX = "task"
    DOMAIN_DISC = "domain"


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label out of range: expected [0, {num_classes}), "
            f"got min {labels.min()} max {labels.max()}")
    return labels


def task_loss(log_probs, labels, tape=None):
    """Mean negative log-probability at the true class."""
    labels = _check_labels(labels, log_probs.cols)
    n = log_probs.rows
    if len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} rows")
    picked = log_probs.data[np.arange(n), labels]
    out = Tensor._wrap(np.array([[-picked.mean()]]), "task_loss")
    if tape is not None:
        grad = np.zeros((n, log_probs.cols))
        grad[np.arange(n), labels] = -1.0 / n
        tape.record(out, [(log_probs, lambda g: g[0, 0] * grad)])
    return out


def disc_loss(d_src, d_tgt, tape=None):
    """Binary cross entropy pushing source rows toward 0 and target rows toward 1.

    Inputs are batch x 1 probability-of-target columns, already clamped away
    from {0, 1}: -mean[log(1 - d_src)] - mean[log d_tgt].
    """
    for name, d in (("d_src", d_src), ("d_tgt", d_tgt)):
        if d.cols != 1:
            raise ShapeError(f"{name} must be a column, got {d.shape}")
    ns, nt = d_src.rows, d_tgt.rows
    val = -np.log(1.0 - d_src.data).mean() - np.log(d_tgt.data).mean()
    out = Tensor._wrap(np.array([[val]]), "disc_loss")
    if tape is not None:
        sd, td = d_src.data, d_tgt.data
        tape.record(out, [
            (d_src, lambda g: g[0, 0] / ((1.0 - sd) * ns)),
            (d_tgt, lambda g: -g[0, 0] / (td * nt)),
        ])
    return out


def feat_adv_loss(d_src, d_tgt, tape=None):
    """Confusion objective for the feature extractor: domain roles swapped.

    Exactly disc_loss with the arguments exchanged, so the extractor is
    rewarded for making source look like target and vice versa.
    """
    return disc_loss(d_tgt, d_src, tape)


def weighted_pseudo_loss(log_probs, pseudo_labels, weights, tape=None, normalize=False):
    """Per-sample-weighted cross entropy against pseudo labels.

    `weights` is a batch x 1 column in [0, 1], treated as a constant. The sum
    is divided by the batch size, or by the weight total when `normalize` is
    set (an all-zero weight batch yields loss 0 either way).
    """
    labels = _check_labels(pseudo_labels, log_probs.cols)
    n = log_probs.rows
    if weights.shape != (n, 1):
        raise ShapeError(f"weights {weights.shape} do not match batch of {n}")
    w = weights.data[:, 0]
    if w.size and (w.min() < 0.0 or w.max() > 1.0):
        raise ValueError("weights must lie in [0, 1]")
    denom = float(w.sum()) if normalize else float(n)
    if denom == 0.0:
        denom = 1.0
    picked = log_probs.data[np.arange(n), labels]
    out = Tensor._wrap(np.array([[-(w * picked).sum() / denom]]), "weighted_pseudo_loss")
    if tape is not None:
        grad = np.zeros((n, log_probs.cols))
        grad[np.arange(n), labels] = -w / denom
        tape.record(out, [(log_probs, lambda g: g[0, 0] * grad)])
    return out


def confidence_domain(d_tgt):
    """Weight of a target sample: how source-like the discriminator finds it."""
    return Tensor(1.0 - d_tgt.data)


def confidence_task(log_probs):
    """Weight of a sample: the classifier's max softmax probability."""
    return Tensor(np.exp(log_probs.data.max(axis=1, keepdims=True)))


def instance_weight(d_src):
    """Weight of a source sample: how target-like the discriminator finds it."""
    return d_src


def pseudo_labels(log_probs):
    """Row-wise argmax class; ties break to the lowest class index."""
    return log_probs.data.argmax(axis=1)
