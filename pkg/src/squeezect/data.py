"""Manifests, image loading, standardization, x4 augmentation and synthetic data."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

LABELS = ("not_covid", "covid")
COVID = LABELS.index("covid")
SPLITS = ("train", "validation", "test1", "test2")
AUGMENTATIONS = ("original", "rotated", "scaled", "noisy")
TARGET = 224


class ManifestError(ValueError):
    pass


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    split: str

    @property
    def label_index(self):
        return LABELS.index(self.label)

    @property
    def id(self):
        return self.path.stem


def load_manifest(path, check_files=True) -> list[ManifestEntry]:
    """Parse a ``path,label,split`` CSV. Relative image paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    entries, seen, missing = [], set(), []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label", "split"]:
            raise ManifestError(f"{path}: header must be 'path,label,split', got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}: row {row_no}: expected 3 fields, got {len(row)}")
            p, label, split = (c.strip() for c in row)
            if label not in LABELS:
                raise ManifestError(f"{path}: row {row_no}: unknown label {label!r} (expected {'|'.join(LABELS)})")
            if split not in SPLITS:
                raise ManifestError(f"{path}: row {row_no}: unknown split {split!r} (expected {'|'.join(SPLITS)})")
            img = Path(p) if Path(p).is_absolute() else base / p
            if img in seen:
                raise ManifestError(f"{path}: row {row_no}: duplicate path {p}")
            seen.add(img)
            if check_files and not img.exists():
                missing.append(str(img))
            entries.append(ManifestEntry(img, label, split))
    if missing:
        raise ManifestError(f"{path}: {len(missing)} image(s) not found: {', '.join(missing[:10])}")
    return entries


def write_manifest(entries, path):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        for e in entries:
            p = e.path
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([p.as_posix(), e.label, e.split])


def load_gray(path, target=TARGET) -> np.ndarray:
    """Decode, convert to luminance, bilinear-resize to ``target`` square, scale to [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                img = Image.fromarray(arr.astype(np.float32), mode="F")
            else:
                img = im.convert("L").convert("F")
                img = Image.fromarray(np.asarray(img, dtype=np.float32) / 255.0, mode="F")
    except (OSError, SyntaxError) as e:
        raise ImageError(f"cannot decode {path}: {e}") from None
    if img.size != (target, target):
        img = img.resize((target, target), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32).copy()


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    @classmethod
    def fit(cls, grays):
        stack = np.asarray(grays, dtype=np.float64)
        std = float(stack.std())
        return cls(float(stack.mean()), std if std > 1e-8 else 1.0)

    def apply(self, gray) -> np.ndarray:
        """(H, W) or (N, H, W) gray in [0, 1] -> standardized (3, H, W) or (N, 3, H, W) float32."""
        z = ((np.asarray(gray, dtype=np.float32) - np.float32(self.mean)) / np.float32(self.std))
        if z.ndim == 2:
            return np.repeat(z[None], 3, axis=0)
        return np.repeat(z[:, None], 3, axis=1)


def load_image(path, normalizer: Normalizer | None = None, target=TARGET) -> np.ndarray:
    """A single image as a (1, 3, target, target) tensor; standardized when a normalizer is given."""
    gray = load_gray(path, target)
    if normalizer is None:
        return np.repeat(gray[None, None], 3, axis=1)
    return normalizer.apply(gray)[None]


@dataclass
class ImageSet:
    """Decoded originals of one split, kept in [0, 1]."""

    images: np.ndarray   # (N, H, W) float32
    labels: np.ndarray   # (N,) int
    ids: list[str]

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_entries(cls, entries, target=TARGET):
        entries = list(entries)
        images = np.stack([load_gray(e.path, target) for e in entries]) if entries else \
            np.zeros((0, target, target), np.float32)
        return cls(images, np.array([e.label_index for e in entries], dtype=np.int64),
                   [e.id for e in entries])


def load_split(entries, split, target=TARGET) -> ImageSet:
    return ImageSet.from_entries([e for e in entries if e.split == split], target)


@dataclass(frozen=True)
class AugmentationSpec:
    rotation: tuple[float, float] = (0.0, 90.0)
    scale: tuple[float, float] = (1.1, 1.3)
    noise_sigma: float = 0.02
    seed: int = 0


def rotate(gray, angle):
    """Counter-clockwise rotation about the centre; bilinear, zero fill."""
    return ndimage.rotate(gray, angle, reshape=False, order=1, mode="constant", cval=0.0).astype(np.float32)


def scale_crop(gray, factor):
    """Bilinear zoom by ``factor`` > 1, then centre-crop back to the input extent."""
    h, w = gray.shape
    big = ndimage.zoom(gray, factor, order=1, mode="grid-constant", cval=0.0, grid_mode=True)
    top = (big.shape[0] - h) // 2
    left = (big.shape[1] - w) // 2
    return big[top:top + h, left:left + w].astype(np.float32)


def augment_one(gray, kind, rng, spec: AugmentationSpec):
    if kind == "original":
        return gray
    if kind == "rotated":
        return rotate(gray, rng.uniform(*spec.rotation))
    if kind == "scaled":
        return scale_crop(gray, rng.uniform(*spec.scale))
    if kind == "noisy":
        return (gray + rng.normal(0.0, spec.noise_sigma, gray.shape)).astype(np.float32)
    raise ValueError(f"unknown augmentation {kind!r}")


def augment_train(images, spec: AugmentationSpec, epoch=0):
    """Yield ``(index, kind, image)``: each original followed by its three transformed copies.

    Every sample draws from its own generator keyed on (seed, epoch, index), so the
    stream is reproducible and independent of evaluation order.
    """
    for i, gray in enumerate(images):
        rng = np.random.default_rng([spec.seed, epoch, i])
        for kind in AUGMENTATIONS:
            yield i, kind, augment_one(gray, kind, rng, spec)


def epoch_samples(train: ImageSet, spec: AugmentationSpec, epoch):
    """Materialize one epoch of the x4 stream as arrays ``(images, labels, source_index)``."""
    idx, imgs = [], []
    for i, _, img in augment_train(train.images, spec, epoch):
        idx.append(i)
        imgs.append(img)
    idx = np.array(idx, dtype=np.int64)
    return np.stack(imgs), train.labels[idx], idx


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


# --------------------------------------------------------------------------
# synthetic CT-like data
# --------------------------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def synth_image(covid, rng, size=256):
    """Body ellipse with two dark lungs; covid images add bright blotches inside the lungs."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = size / 256.0
    img = np.zeros((size, size))
    cy = size / 2 + rng.uniform(-8, 8) * s
    cx = size / 2 + rng.uniform(-8, 8) * s
    theta = rng.uniform(-0.15, 0.15)
    body = _ellipse(yy, xx, cy, cx, rng.uniform(85, 100) * s, rng.uniform(105, 118) * s, theta)
    img[body] = rng.uniform(0.40, 0.50)
    lungs = []
    for side in (-1, 1):
        ly = cy + rng.uniform(-6, 6) * s
        lx = cx + side * rng.uniform(40, 50) * s
        ry, rx = rng.uniform(55, 68) * s, rng.uniform(26, 34) * s
        mask = _ellipse(yy, xx, ly, lx, ry, rx, theta + rng.uniform(-0.1, 0.1))
        img[mask] = rng.uniform(0.08, 0.16)
        lungs.append((ly, lx, ry, rx))
    if covid:
        for _ in range(rng.integers(3, 7)):
            ly, lx, ry, rx = lungs[rng.integers(0, 2)]
            r = np.sqrt(rng.uniform(0, 0.55))
            a = rng.uniform(0, 2 * np.pi)
            by, bx = ly + r * ry * np.sin(a), lx + r * rx * np.cos(a)
            sigma = rng.uniform(5, 9) * s
            img += rng.uniform(0.75, 0.9) * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma ** 2))
    img += rng.normal(0.0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(out_dir, n_per_class=50, seed=7, size=256):
    """Write ``2 * n_per_class`` PNGs plus ``manifest.csv`` with a 60/20/20 split per class."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = round(0.6 * n_per_class)
    n_val = round(0.2 * n_per_class)
    entries = []
    for label in LABELS:
        covid = label == "covid"
        for k in range(n_per_class):
            img = synth_image(covid, rng, size)
            p = out_dir / "images" / f"{label}_{k:04d}.png"
            Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(p)
            split = "train" if k < n_train else "validation" if k < n_train + n_val else "test1"
            entries.append(ManifestEntry(p, label, split))
    manifest = out_dir / "manifest.csv"
    write_manifest(entries, manifest)
    return manifest
