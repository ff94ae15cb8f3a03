"""Adam, the adversarial ramp/decay schedule, and per-iteration updates.

Each method variant composes the same few update rules:

  task update        source batch through extractor + task head
  discriminator      domain head on frozen features, source vs target
  adversarial        extractor against a frozen-parameter domain head
  pseudo-label pass  forward only, emits labels + confidence weights
  target update      target head (and extractor) on weighted pseudo labels
  instance update    target head (and extractor) on weighted source labels

A training run owns its bundle and optimizer state; runs never share state.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import GradTape, NonFiniteError, Tensor
from .models import (
    forward_domain, forward_features, forward_target, forward_task, init_bundle,
)
from .losses import (
    ConfidenceSource, confidence_domain, confidence_task, disc_loss,
    feat_adv_loss, instance_weight, pseudo_labels, task_loss,
    weighted_pseudo_loss,
)
from .data import BatchIterator

METHODS = ("no-adapt", "dann", "instance", "pseudo-noadv", "pseudo")
_NEEDS_CONFIDENCE = ("instance", "pseudo-noadv", "pseudo")

# Below this, a whole batch of confidence weights counts as vanished: Adam
# would otherwise rescale the numerically meaningless gradient up to a full
# step, breaking the low-confidence => small-update contract.
WEIGHT_GUARD = 1e-6


class TrainingAborted(RuntimeError):
    """A non-finite gradient stopped the run; carries the last good step."""

    def __init__(self, step, cause):
        super().__init__(f"aborted at step {step}: {cause}")
        self.last_good_step = step - 1
        self.cause = cause


@dataclass
class TrainConfig:
    method: str
    confidence: ConfidenceSource | None = None
    eval_head: str = "task"            # which head the harness scores
    steps: int = 4000
    lr_main: float = 1e-3
    lr_target: float = 5e-4
    batch_size: int = 64
    gamma: float = 10.0                # adversarial ramp sharpness
    alpha: float = 10.0                # lr decay rate
    beta: float = 0.75                 # lr decay exponent
    weight_norm: bool = False          # divide weighted losses by sum(w) instead of n
    burn_in: int = 0                   # steps before target/instance updates start
    target_lr_schedule: bool = False   # decay lr_target like lr_main
    seed: int = 0
    hidden: int = 64
    feat_dim: int = 32

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.steps < 1 or self.batch_size < 2:
            raise ValueError("steps must be >= 1 and batch_size >= 2")
        if self.lr_main <= 0 or self.lr_target <= 0:
            raise ValueError("learning rates must be positive")
        if self.eval_head not in ("task", "target"):
            raise ValueError(f"unknown eval head {self.eval_head!r}")
        if self.confidence is not None:
            self.confidence = ConfidenceSource(self.confidence)
        if self.method in _NEEDS_CONFIDENCE and self.confidence is None:
            raise ValueError(f"method {self.method!r} needs a confidence source")
        if self.method in ("no-adapt", "dann"):
            if self.confidence is not None:
                raise ValueError(f"method {self.method!r} takes no confidence source")
            if self.eval_head != "task":
                raise ValueError(f"method {self.method!r} never trains the target head")


@dataclass
class StepMetrics:
    """Per-step record; fields a variant does not produce stay None."""

    step: int
    lam: float
    lr: float
    task_loss: float | None = None
    disc_loss: float | None = None
    adv_loss: float | None = None
    pseudo_loss: float | None = None
    mean_weight: float | None = None


class ParamSlot:
    """Addressable parameter location; updates swap in fresh tensors."""

    __slots__ = ("layer", "name")

    def __init__(self, layer, name):
        self.layer = layer
        self.name = name

    def get(self):
        return getattr(self.layer, self.name)

    def set(self, tensor):
        setattr(self.layer, self.name, tensor)


def slots_of(*mlps):
    return [ParamSlot(layer, name) for mlp in mlps for layer in mlp.layers
            for name in ("w", "b")]


class Adam:
    """Adam with bias correction over a fixed list of parameter slots."""

    def __init__(self, slots, beta1=0.9, beta2=0.999, eps=1e-8):
        self.slots = list(slots)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(s.get().shape) for s in self.slots]
        self.v = [np.zeros(s.get().shape) for s in self.slots]

    def step(self, grads, lr, scale=1.0, term="loss"):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for slot, m, v in zip(self.slots, self.m, self.v):
            p = slot.get()
            g = grads.wrt(p)
            if scale != 1.0:
                g = g * scale
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient in {term}")
            m[:] = b1 * m + (1.0 - b1) * g
            v[:] = b2 * v + (1.0 - b2) * g * g
            new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            slot.set(Tensor._wrap(new, term))


def schedule(step, total_steps, lr_main=1e-3, gamma=10.0, alpha=10.0, beta=0.75):
    """Adversarial weight ramp and learning-rate decay over training progress.

    With p = step/total_steps: lambda = 2/(1+exp(-gamma*p)) - 1 and
    lr = lr_main/(1+alpha*p)**beta, so lambda(0)=0 and lr(0)=lr_main.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    p = step / total_steps
    lam = 2.0 / (1.0 + np.exp(-gamma * p)) - 1.0
    lr = lr_main / (1.0 + alpha * p) ** beta
    return float(lr), float(lam)


def task_update_step(bundle, batch, opt, lr):
    """Update extractor + task head on labeled source data."""
    tape = GradTape()
    feats = forward_features(bundle.extractor, batch.x, tape)
    logp = forward_task(bundle.task_head, feats, tape)
    loss = task_loss(logp, batch.y, tape)
    opt.step(tape.backward(loss), lr, term="task_loss")
    return loss.item()


def disc_update_step(bundle, x_src, x_tgt, opt, lr):
    """Update the domain head only; extractor output is held constant."""
    f_src = forward_features(bundle.extractor, x_src, None)
    f_tgt = forward_features(bundle.extractor, x_tgt, None)
    tape = GradTape()
    d_src = forward_domain(bundle.domain_head, f_src, tape)
    d_tgt = forward_domain(bundle.domain_head, f_tgt, tape)
    loss = disc_loss(d_src, d_tgt, tape)
    opt.step(tape.backward(loss), lr, term="disc_loss")
    return loss.item()


def adversarial_update_step(bundle, x_src, x_tgt, opt, lr, lam):
    """Update the extractor to confuse the (frozen) domain head, scaled by lam."""
    tape = GradTape()
    d_src = forward_domain(bundle.domain_head,
                           forward_features(bundle.extractor, x_src, tape), tape)
    d_tgt = forward_domain(bundle.domain_head,
                           forward_features(bundle.extractor, x_tgt, tape), tape)
    loss = feat_adv_loss(d_src, d_tgt, tape)
    opt.step(tape.backward(loss), lr, scale=lam, term="feat_adv_loss")
    return loss.item()


def dann_step(bundle, batch, x_tgt, opts, lr, lam, step=0):
    """The three fixed-order updates: task, discriminator, adversarial."""
    tl = task_update_step(bundle, batch, opts["task"], lr)
    dl = disc_update_step(bundle, batch.x, x_tgt, opts["disc"], lr)
    al = adversarial_update_step(bundle, batch.x, x_tgt, opts["adv"], lr, lam)
    return StepMetrics(step, lam, lr, task_loss=tl, disc_loss=dl, adv_loss=al)


def pseudo_label_step(bundle, x_tgt, confidence):
    """Forward-only pass: pseudo labels, confidence weights, raw d values.

    No parameter changes anywhere; the returned weights are constants.
    """
    feats = forward_features(bundle.extractor, x_tgt, None)
    logp = forward_task(bundle.task_head, feats, None)
    labels = pseudo_labels(logp)
    d_vals = forward_domain(bundle.domain_head, feats, None)
    if ConfidenceSource(confidence) is ConfidenceSource.DOMAIN_DISC:
        weights = confidence_domain(d_vals)
    else:
        weights = confidence_task(logp)
    return labels, weights, d_vals


def target_update_step(bundle, x_tgt, labels, weights, opt, lr, normalize=False):
    """Update target head and the shared extractor on weighted pseudo labels."""
    tape = GradTape()
    feats = forward_features(bundle.extractor, x_tgt, tape)
    logp = forward_target(bundle.target_head, feats, tape)
    loss = weighted_pseudo_loss(logp, labels, weights, tape, normalize=normalize)
    if weights.data.max() > WEIGHT_GUARD:
        opt.step(tape.backward(loss), lr, term="weighted_pseudo_loss")
    return loss.item()


def instance_update_step(bundle, batch, confidence, opt, lr, normalize=False):
    """Update target head (and extractor) on source labels, weighted by
    how target-like each source row looks (or task confidence)."""
    tape = GradTape()
    feats = forward_features(bundle.extractor, batch.x, tape)
    logp = forward_target(bundle.target_head, feats, tape)
    if ConfidenceSource(confidence) is ConfidenceSource.DOMAIN_DISC:
        weights = instance_weight(forward_domain(bundle.domain_head, feats, None))
    else:
        weights = confidence_task(forward_task(bundle.task_head, feats, None))
    loss = weighted_pseudo_loss(logp, batch.y, weights, tape, normalize=normalize)
    if weights.data.max() > WEIGHT_GUARD:
        opt.step(tape.backward(loss), lr, term="instance_weighted_loss")
    return loss.item(), float(weights.data.mean())


class MetricsWriter:
    """Streams StepMetrics as CSV rows; absent values become empty cells."""

    COLUMNS = ("step", "task_loss", "disc_loss", "adv_loss", "pseudo_loss",
               "mean_weight", "lambda", "lr")

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.COLUMNS)

    def write(self, m):
        def cell(v):
            return "" if v is None else repr(v)
        self._writer.writerow([m.step, cell(m.task_loss), cell(m.disc_loss),
                               cell(m.adv_loss), cell(m.pseudo_loss),
                               cell(m.mean_weight), repr(m.lam), repr(m.lr)])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def train(config, pair, metrics_sink=None, eval_every=0, on_eval=None):
    """Run one method variant; returns (bundle, per-step metrics history).

    `on_eval(step, bundle)` fires every `eval_every` steps and at the final
    step. Fully deterministic given (config, pair).
    """
    init_seed, batch_seed = np.random.SeedSequence(config.seed).spawn(2)
    bundle = init_bundle(pair.input_dim, config.feat_dim, config.hidden,
                         pair.num_classes, seed=init_seed)
    batches = BatchIterator(pair, config.batch_size, seed=batch_seed)
    opts = {
        "task": Adam(slots_of(bundle.extractor, bundle.task_head)),
        "disc": Adam(slots_of(bundle.domain_head)),
        "adv": Adam(slots_of(bundle.extractor)),
        "target": Adam(slots_of(bundle.target_head, bundle.extractor)),
    }
    history = []
    method = config.method
    for step in range(config.steps):
        lr, lam = schedule(step, config.steps, config.lr_main,
                           config.gamma, config.alpha, config.beta)
        lr_t = (schedule(step, config.steps, config.lr_target,
                         config.gamma, config.alpha, config.beta)[0]
                if config.target_lr_schedule else config.lr_target)
        try:
            if method == "no-adapt":
                batch = batches.next_source()
                tl = task_update_step(bundle, batch, opts["task"], lr)
                metrics = StepMetrics(step, lam, lr, task_loss=tl)
            elif method == "dann":
                batch, x_tgt = batches.next()
                metrics = dann_step(bundle, batch, x_tgt, opts, lr, lam, step)
            elif method == "instance":
                batch, x_tgt = batches.next()
                metrics = dann_step(bundle, batch, x_tgt, opts, lr, lam, step)
                if step >= config.burn_in:
                    pl, mw = instance_update_step(bundle, batch, config.confidence,
                                                  opts["target"], lr_t,
                                                  normalize=config.weight_norm)
                    metrics.pseudo_loss, metrics.mean_weight = pl, mw
            else:  # pseudo-noadv, pseudo
                batch, x_tgt = batches.next()
                tl = task_update_step(bundle, batch, opts["task"], lr)
                dl = disc_update_step(bundle, batch.x, x_tgt, opts["disc"], lr)
                al = None
                if method == "pseudo":
                    al = adversarial_update_step(bundle, batch.x, x_tgt,
                                                 opts["adv"], lr, lam)
                metrics = StepMetrics(step, lam, lr, task_loss=tl,
                                      disc_loss=dl, adv_loss=al)
                if step >= config.burn_in:
                    labels, weights, _ = pseudo_label_step(bundle, x_tgt,
                                                           config.confidence)
                    metrics.pseudo_loss = target_update_step(
                        bundle, x_tgt, labels, weights, opts["target"], lr_t,
                        normalize=config.weight_norm)
                    metrics.mean_weight = float(weights.data.mean())
        except NonFiniteError as exc:
            raise TrainingAborted(step, str(exc)) from exc
        history.append(metrics)
        if metrics_sink is not None:
            metrics_sink.write(metrics)
        if on_eval is not None and eval_every > 0:
            if (step + 1) % eval_every == 0 or step + 1 == config.steps:
                on_eval(step + 1, bundle)
    return bundle, history
