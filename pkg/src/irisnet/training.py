"""Training: the regularized cross-entropy objective, Adam/SGD steps, the
epoch loop with validation-based checkpoint selection, and evaluation.

The loss is mean cross-entropy over the batch plus ``lambda1`` times the
squared Frobenius norm of the classifier-head weight matrix. With
lambda1 = 0 the penalty branch is skipped entirely, so the result is
bit-identical to plain cross-entropy.

All shuffling derives from the config seed; two runs with the same seed,
data and config produce bit-identical reports and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import store
from .autodiff import Tensor, mul, tensor_sum
from .data import AUGMENT_OPS, augment, channel_stats, derived_rng
from .errors import DegenerateBatch, EmptySplit, LabelOutOfRange, ShapeMismatch
from .model import Model


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 24
    learning_rate: float = 0.0002
    lambda1: float = 1e-4
    optimizer: str = "adam"  # "adam" or "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    freeze_prefixes: tuple = ()
    augment: tuple = ()  # training-set augmentation ops, fresh views each epoch

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise DegenerateBatch(f"batch_size must be >= 2 (batchnorm), got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.lambda1 < 0:
            raise ValueError(f"lambda1 must be >= 0, got {self.lambda1}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        unknown = set(self.augment) - set(AUGMENT_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainReport:
    per_epoch: list
    best_epoch: int
    best_val_accuracy: float
    test_accuracy: float | None = None

    def csv_text(self) -> str:
        lines = ["epoch,train_loss,val_acc"]
        lines += [f"{r.epoch},{r.train_loss:.6f},{r.val_accuracy:.6f}" for r in self.per_epoch]
        return "\n".join(lines) + "\n"

    def log_lines(self):
        lines = [f"epoch {r.epoch} train_loss {r.train_loss:.6f} val_acc {r.val_accuracy:.6f}"
                 for r in self.per_epoch]
        lines.append(f"best_epoch {self.best_epoch} best_val_acc {self.best_val_accuracy:.6f}")
        if self.test_accuracy is not None:
            lines.append(f"test_accuracy {self.test_accuracy:.6f}")
        return lines


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp."""
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects [b,n] logits, got {logits.shape}")
    b, n = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != b:
        raise ShapeMismatch(f"{labels.size} labels for {b} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise LabelOutOfRange(f"labels must lie in [0,{n}), got range "
                              f"[{labels.min()},{labels.max()}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    lse = zmax[:, 0] + np.log(e.sum(axis=1))
    losses = lse - z[np.arange(b), labels]
    out = losses.mean(dtype=z.dtype).reshape(1)

    def backward_fn(g):
        if logits.requires_grad:
            soft = e / e.sum(axis=1, keepdims=True)
            soft[np.arange(b), labels] -= 1
            logits._accumulate(soft * (g.reshape(-1)[0] / b))

    return Tensor._from_op(out, (logits,), backward_fn, "cross_entropy")


def final_loss(logits: Tensor, labels, w_fc: Tensor, lambda1: float) -> Tensor:
    """Cross-entropy plus lambda1 * sum of squared head-weight entries.

    lambda1 == 0 returns the cross-entropy tensor itself (bit-identical).
    """
    ce = cross_entropy(logits, labels)
    if lambda1 == 0:
        return ce
    penalty = mul(tensor_sum(mul(w_fc, w_fc)), float(lambda1))
    return ce + penalty


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig,
              frozen=frozenset()) -> None:
    """Bias-corrected Adam update in place; frozen names are untouched."""
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_eps, config.learning_rate
    for name, p in params.items():
        g = grads.get(name)
        if g is None or name in frozen:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        v = state.v[name]
        t = state.t[name] + 1
        state.t[name] = t
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def sgd_step(params: dict, grads: dict, lr: float, frozen=frozenset()) -> None:
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None or name in frozen:
            continue
        p.data -= lr * g


def stack_images(images) -> Tensor:
    """Stack [3,h,w] pixel arrays into a [b,3,h,w] input tensor."""
    return Tensor(np.stack([im.pixels if hasattr(im, "pixels") else im for im in images]))


def evaluate(model: Model, images, labels, batch_size: int = 64) -> float:
    """Fraction of argmax predictions matching labels, in eval mode."""
    if len(images) == 0:
        raise EmptySplit("evaluate needs a non-empty set")
    labels = [im.class_id for im in images] if labels is None else list(labels)
    correct = 0
    for lo in range(0, len(images), batch_size):
        chunk = images[lo:lo + batch_size]
        preds = model.predict(stack_images(chunk))
        correct += sum(int(p == y) for p, y in zip(preds, labels[lo:lo + batch_size]))
    return correct / len(images)


def _train_batches(n: int, batch_size: int, order):
    """Full batches only; a single short batch (>= 2) is kept when the whole
    set is smaller than one batch."""
    full = n // batch_size
    if full == 0:
        if n < 2:
            raise DegenerateBatch(f"{n} training images cannot form a batch of >= 2")
        return [order]
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(full)]


def train(model: Model, split, config: TrainConfig):
    """Train in place, tracking validation accuracy each epoch; returns the
    parameter snapshot from the best epoch (ties to the earliest) plus the
    report. The passed model is left at the final epoch."""
    config.validate()
    for part, items in (("train", split.train), ("val", split.val), ("test", split.test)):
        if not items:
            raise EmptySplit(f"{part} partition is empty")
    labels = [im.class_id for im in split.train]
    if min(labels) < 0 or max(labels) >= split.class_count:
        raise LabelOutOfRange(f"train labels outside [0,{split.class_count})")

    if config.freeze_prefixes:
        store.freeze(model, list(config.freeze_prefixes))
    frozen = model.frozen

    # input standardization from the training split; frozen models keep
    # the statistics they were trained with
    if "input_norm.mean" not in frozen:
        mean, std = channel_stats(split.train)
        model.parameters["input_norm.mean"].data[...] = mean
        model.parameters["input_norm.std"].data[...] = std

    rng = derived_rng(config.seed, "train.shuffle")
    state = AdamState()
    trainable = {n: model.parameters[n] for n in model.trainable_names()}
    w_fc = model.head_weight()

    records = []
    best_epoch, best_acc, best_params = 0, -1.0, None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(split.train))
        epoch_losses = []
        for batch_idx in _train_batches(len(split.train), config.batch_size, order):
            batch = [split.train[i] for i in batch_idx]
            if config.augment:
                # per-(epoch, example) streams keep views independent of batch order
                batch = [augment(im, config.augment, derived_rng(config.seed, "augment", epoch, int(i)))
                         for im, i in zip(batch, batch_idx)]
            images = stack_images(batch)
            batch_labels = [im.class_id for im in batch]
            for p in trainable.values():
                p.grad = None
            logits = model.forward(images, training=True)
            loss = final_loss(logits, batch_labels, w_fc, config.lambda1)
            loss.backward()
            grads = {n: p.grad for n, p in trainable.items() if p.grad is not None}
            if config.optimizer == "adam":
                adam_step(trainable, grads, state, config, frozen)
            else:
                sgd_step(trainable, grads, config.learning_rate, frozen)
            epoch_losses.append(loss.item())
        val_acc = evaluate(model, split.val, None)
        records.append(EpochRecord(epoch, float(np.mean(epoch_losses)), val_acc))
        if val_acc > best_acc:
            best_epoch, best_acc = epoch, val_acc
            best_params = {n: t.data.copy() for n, t in model.parameters.items()}

    best_model = model.clone()
    for n, data in best_params.items():
        best_model.parameters[n].data[...] = data
    report = TrainReport(records, best_epoch, best_acc)
    return best_model, report
