"""Confusion-matrix metrics, the sensitivity-per-parameter ratio, CAMs and timing."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import ops
from .architecture import Network, count_params
from .data import COVID, ImageSet, Normalizer
from .training import predict_logits


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    f1: float | None
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def lines(self):
        out = []
        for key in ("accuracy", "sensitivity", "specificity", "precision", "f1"):
            v = getattr(self, key)
            out.append(f"{key}={'NA' if v is None else f'{v:.4f}'}")
        out += [f"tp={self.tp}", f"fp={self.fp}", f"tn={self.tn}", f"fn={self.fn}"]
        return out


def confusion(predictions, labels, positive=COVID) -> ConfusionMatrix:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise ValueError("confusion matrix needs at least one sample")
    pp, yp = p == positive, y == positive
    return ConfusionMatrix(tp=int(np.sum(pp & yp)), fp=int(np.sum(pp & ~yp)),
                           tn=int(np.sum(~pp & ~yp)), fn=int(np.sum(~pp & yp)))


def _ratio(num, den):
    return num / den if den else None


def f1_score(precision, sensitivity):
    if precision is None or sensitivity is None or precision + sensitivity == 0:
        return None
    return 2 * precision * sensitivity / (precision + sensitivity)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Ratios with a zero denominator are reported as ``None``."""
    sens = _ratio(cm.tp, cm.tp + cm.fn)
    prec = _ratio(cm.tp, cm.tp + cm.fp)
    return MetricsReport(
        accuracy=_ratio(cm.tp + cm.tn, cm.total),
        sensitivity=sens,
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
        precision=prec,
        f1=f1_score(prec, sens),
        tp=cm.tp, fp=cm.fp, tn=cm.tn, fn=cm.fn,
    )


def efficiency(sensitivity_percent, params_millions):
    """Sensitivity (percent) per million parameters."""
    if params_millions <= 0:
        raise ValueError(f"parameter count must be positive, got {params_millions}")
    return sensitivity_percent / params_millions


@dataclass
class Prediction:
    id: str
    label: int
    predicted: int
    p_covid: float
    p_other: float


def evaluate(net: Network, data: ImageSet, normalizer: Normalizer, batch_size=32):
    """Inference-mode predictions over a split; returns ``(MetricsReport, [Prediction])``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    probs = ops.softmax(predict_logits(net, data.images, normalizer, batch_size).astype(np.float64))
    pred = probs.argmax(axis=1)
    records = [Prediction(i, int(y), int(p), float(pr[COVID]), float(pr[1 - COVID]))
               for i, y, p, pr in zip(data.ids, data.labels, pred, probs)]
    return metrics(confusion(pred, data.labels)), records


def write_predictions(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "predicted", "p_covid"])
        for r in records:
            w.writerow([r.id, r.label, r.predicted, repr(r.p_covid)])


def read_predictions(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [(row["id"], int(row["label"]), int(row["predicted"]), float(row["p_covid"]))
                for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# class activation maps
# --------------------------------------------------------------------------

@dataclass
class CamHeatmap:
    class_index: int
    raw: np.ndarray          # feature resolution
    normalized: np.ndarray   # raw min-max scaled to [0, 1]
    upsampled: np.ndarray    # normalized map at input resolution


def class_activation_map(features, weights):
    """``sum_k weights[k] * features[k]`` for features (K, H, W) and weights (K,)."""
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if features.ndim != 3 or weights.shape != (features.shape[0],):
        raise ValueError(f"features {features.shape} and weights {weights.shape} do not conform")
    return np.tensordot(weights, features, axes=1)


def normalize_map(m):
    """Min-max scale to [0, 1]; a flat map becomes 0.5 everywhere."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi), abs(lo)):
        return np.full_like(m, 0.5)
    return (m - lo) / (hi - lo)


def upsample(m, size):
    img = Image.fromarray(np.asarray(m, dtype=np.float32), mode="F")
    return np.clip(np.asarray(img.resize((size[1], size[0]), Image.BILINEAR), dtype=np.float64), 0, 1)


def cam_sources(net: Network):
    """Node holding the pre-pooling class evidence and the per-class weight rows.

    For the fusion network that is the concatenated feature stack with the dense
    head's rows; for the SqueezeNet baselines the 1x1 classifier conv already
    produces one map per class, so the weights are the identity.
    """
    names = {n.name for n in net.nodes}
    if "features" in names and "head" in names:
        return "features", net.node("head").layer.weight.data
    if "conv10" in names:
        return "conv10", np.eye(net.num_classes)
    raise ValueError("network has no class-activation head")


def cam(net: Network, image, class_index) -> CamHeatmap:
    if not 0 <= class_index < net.num_classes:
        raise ValueError(f"class index {class_index} outside [0, {net.num_classes})")
    if image.ndim == 3:
        image = image[None]
    node, weights = cam_sources(net)
    _, captured, _ = net.run(image, capture=(node,))
    raw = class_activation_map(captured[node][0], weights[class_index])
    norm = normalize_map(raw)
    return CamHeatmap(class_index, raw, norm, upsample(norm, image.shape[2:]))


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------

@dataclass
class BenchResult:
    samples: list[float]
    threads: int
    params: int

    @property
    def mean(self):
        return float(np.mean(self.samples))

    @property
    def min(self):
        return float(np.min(self.samples))

    @property
    def max(self):
        return float(np.max(self.samples))


def blas_threads():
    try:
        from threadpoolctl import threadpool_info
        counts = [i.get("num_threads", 1) for i in threadpool_info() if i.get("user_api") == "blas"]
        return max(counts) if counts else 1
    except ImportError:
        return int(os.environ.get("OMP_NUM_THREADS", 1))


def bench_inference(net: Network, image, repetitions=5) -> BenchResult:
    """Wall-clock of single-image inference; one warm-up pass is discarded."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    if image.ndim == 3:
        image = image[None]
    net.forward(image[:1])
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        net.forward(image[:1])
        samples.append(time.perf_counter() - t0)
    return BenchResult(samples, blas_threads(), count_params(net))
