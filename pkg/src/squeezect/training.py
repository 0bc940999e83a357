"""SGD with momentum and L2, the step learning-rate schedule and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .architecture import ArchVariant, Network
from .data import AugmentationSpec, ImageSet, Normalizer, epoch_order, epoch_samples
from .weights import read_archive, save_weights

log = logging.getLogger(__name__)

EXPERIMENTS = ("exp1", "exp2", "exp3", "exp4")


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.007132
    momentum: float = 0.87589
    l2: float = 0.9532e-6

    def __post_init__(self):
        if not 0 <= self.learning_rate <= 1:
            raise ConfigError(f"learning rate must lie in [0, 1], got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be non-negative, got {self.l2}")


@dataclass(frozen=True)
class TrainConfig:
    hyperparams: Hyperparams = Hyperparams()
    epochs: int = 20
    batch_size: int = 32
    lr_drop_factor: float = 0.8
    lr_drop_period: int = 5
    seed: int = 0
    experiment: str = "exp4"
    augmentation: AugmentationSpec | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr_drop_period < 1:
            raise ConfigError("epochs, batch size and drop period must be positive")
        if not 0 < self.lr_drop_factor <= 1:
            raise ConfigError(f"lr drop factor must lie in (0, 1], got {self.lr_drop_factor}")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")

    @property
    def aug(self):
        return self.augmentation or AugmentationSpec(seed=self.seed)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0          # 1-based; 0 until an epoch has run
    checkpoint: Path | None = None

    @property
    def best_val_accuracy(self):
        return self.val_accuracy[self.best_epoch - 1] if self.best_epoch else float("nan")


def sgd_step(w, g, v, hp: Hyperparams, lr):
    """``v <- momentum * v + lr * (g + l2 * w)``; ``w <- w - v``. Updates in place."""
    if w.shape != g.shape or w.shape != v.shape:
        raise ops.ShapeError(f"sgd: shapes differ, w {w.shape}, g {g.shape}, v {v.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    v *= hp.momentum
    v += lr * (g + hp.l2 * w)
    w -= v
    return w, v


def lr_schedule(epoch, lr0, drop_factor=0.8, drop_period=5):
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    return lr0 * drop_factor ** ((epoch - 1) // drop_period)


class SGD:
    def __init__(self, net: Network, hp: Hyperparams):
        self.hp = hp
        self.params = net.parameters(trainable_only=True)
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        for k, p in self.params.items():
            try:
                sgd_step(p.data, p.grad, self.velocity[k], self.hp, lr)
            except NumericError:
                raise NumericError(f"non-finite gradient for {k}") from None


def configure_experiment(tag, weights=None):
    """Map an experiment tag to ``(ArchVariant, transfer)``; transfer needs a weight archive."""
    table = {
        "exp1": (ArchVariant("squeezenet_plain", "classic"), True),
        "exp2": (ArchVariant("squeezenet_simple_bypass", "classic"), False),
        "exp3": (ArchVariant("squeezenet_simple_bypass", "classic"), True),
        "exp4": (ArchVariant("proposed", "custom"), False),
    }
    if tag not in table:
        raise ConfigError(f"unknown experiment {tag!r}; expected one of {EXPERIMENTS}")
    variant, transfer = table[tag]
    if transfer and weights is None:
        raise ConfigError(f"{tag} uses transfer learning and needs a weight archive (--weights)")
    return variant, transfer


def batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def predict_logits(net: Network, images, normalizer: Normalizer, batch_size=32):
    out = []
    for sl in batches(len(images), batch_size):
        out.append(net.logits(normalizer.apply(images[sl])))
    return np.concatenate(out) if out else np.zeros((0, net.num_classes), np.float32)


def accuracy(net, data: ImageSet, normalizer, batch_size=32):
    if len(data) == 0:
        return float("nan")
    pred = predict_logits(net, data.images, normalizer, batch_size).argmax(axis=1)
    return float(np.mean(pred == data.labels))


def write_sidecar(path, meta):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")


def read_sidecar(path):
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                meta[k.strip()] = v.strip()
    return meta


def sidecar_path(checkpoint):
    return Path(checkpoint).with_suffix(".meta")


def save_checkpoint(net, path, meta):
    path = Path(path)
    save_weights(net, path)
    write_sidecar(sidecar_path(path), meta)


def load_normalizer(meta):
    return Normalizer(float(meta["norm_mean"]), float(meta["norm_std"]))


def _snapshot(net):
    return {k: p.data.copy() for k, p in net.parameters().items()}


def _restore(net, snap):
    for k, p in net.parameters().items():
        p.data[...] = snap[k]


def train(net: Network, train_set: ImageSet, val_set: ImageSet, cfg: TrainConfig,
          normalizer: Normalizer | None = None, out_dir=None, restore_best=True,
          on_epoch=None) -> TrainReport:
    """Train for ``cfg.epochs`` epochs over the x4-augmented train split.

    Validation accuracy is measured after every epoch; the best epoch (earliest on
    ties) is written to ``out_dir/checkpoint.sqz`` when ``out_dir`` is given and,
    with ``restore_best``, loaded back into ``net`` at the end.
    """
    if len(train_set) == 0:
        raise ConfigError("empty training split")
    normalizer = normalizer or Normalizer.fit(train_set.images)
    hp = cfg.hyperparams
    opt = SGD(net, hp)
    report = TrainReport()
    best_acc, best_state = -1.0, None
    ckpt = Path(out_dir) / "checkpoint.sqz" if out_dir is not None else None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, hp.learning_rate, cfg.lr_drop_factor, cfg.lr_drop_period)
        images, labels, _ = epoch_samples(train_set, cfg.aug, epoch)
        order = epoch_order(len(labels), cfg.seed, epoch)
        loss_sum, correct = 0.0, 0
        for b, sl in enumerate(batches(len(order), cfg.batch_size), start=1):
            idx = order[sl]
            x = normalizer.apply(images[idx])
            y = labels[idx]
            logits, _, tape = net.run(x, training=True, record=True)
            loss, dlogits = ops.softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            net.zero_grad()
            net.backward(tape, dlogits.astype(logits.dtype))
            try:
                opt.step(lr)
            except NumericError as e:
                raise NumericError(f"{e} at epoch {epoch}, batch {b}") from None
            loss_sum += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == y))
        val_acc = accuracy(net, val_set, normalizer, cfg.batch_size)
        report.train_loss.append(loss_sum / len(order))
        report.train_accuracy.append(correct / len(order))
        report.val_accuracy.append(val_acc)
        report.learning_rate.append(lr)
        report.seconds.append(time.perf_counter() - t0)
        log.info("epoch %d/%d lr=%.6g loss=%.4f train_acc=%.4f val_acc=%.4f (%.1fs)", epoch,
                 cfg.epochs, lr, report.train_loss[-1], report.train_accuracy[-1], val_acc,
                 report.seconds[-1])
        if val_acc > best_acc or best_state is None:
            best_acc, report.best_epoch = val_acc, epoch
            best_state = _snapshot(net)
            if ckpt is not None:
                meta = {
                    "epoch": epoch, "val_accuracy": f"{val_acc:.6f}",
                    "learning_rate": hp.learning_rate, "momentum": hp.momentum, "l2": hp.l2,
                    "experiment": cfg.experiment, "seed": cfg.seed, "variant": net.variant,
                    "norm_mean": repr(normalizer.mean), "norm_std": repr(normalizer.std),
                }
                meta.update(validation_metrics(net, val_set, normalizer, cfg.batch_size))
                save_checkpoint(net, ckpt, meta)
                report.checkpoint = ckpt
        if on_epoch is not None:
            on_epoch(epoch, report)
    if restore_best and best_state is not None:
        _restore(net, best_state)
    return report


def validation_metrics(net, val_set, normalizer, batch_size=32):
    """Validation sensitivity/specificity recorded in checkpoint sidecars."""
    from .evaluation import confusion, metrics

    if len(val_set) == 0:
        return {}
    pred = predict_logits(net, val_set.images, normalizer, batch_size).argmax(axis=1)
    m = metrics(confusion(pred, val_set.labels))
    return {f"val_{k}": ("NA" if v is None else f"{v:.6f}") for k, v in asdict(m).items()
            if k in ("sensitivity", "specificity", "precision", "f1")}


def checkpoint_meta(path):
    """Sidecar metadata merged over the archive header."""
    meta, _ = read_archive(path)
    side = sidecar_path(path)
    if side.exists():
        meta.update(read_sidecar(side))
    return meta
