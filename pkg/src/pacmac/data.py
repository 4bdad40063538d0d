"""Synthetic two-domain shape datasets, dataset persistence, augmentation.

Eight shape classes are rasterized from signed-distance functions at a
randomized position, scale, and rotation. A domain spec controls style only
(fill vs outline rendering, background level, color palette, noise), never
geometry, so the class of a given (class id, pose) pair is identical across
domains. The default source/target specs give a source of filled shapes on
light backgrounds and a target of outlined shapes on dark noisy backgrounds.

Datasets persist as a directory holding manifest.json, a raw float32
payload, and an optional labels csv. Generation and loading are pure given
seed and path.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptManifestError,
    EmptyDatasetError,
    InvalidSpecError,
    MagicMismatchError,
    TruncatedPayloadError,
)

SHAPE_NAMES = ("disk", "square", "triangle", "cross", "ring", "bar", "ell", "dot_grid")

DATASET_MAGIC = b"PMD1"

SOURCE_PALETTE = ((0.80, 0.15, 0.15), (0.15, 0.25, 0.80), (0.10, 0.60, 0.25),
                  (0.85, 0.50, 0.05), (0.50, 0.15, 0.65), (0.05, 0.55, 0.60))
TARGET_PALETTE = ((0.95, 0.55, 0.55), (0.55, 0.65, 0.95), (0.55, 0.90, 0.60),
                  (0.95, 0.80, 0.45), (0.85, 0.60, 0.95), (0.50, 0.90, 0.90))


@dataclass(frozen=True)
class DomainSpec:
    """Style of one domain; label semantics never live here."""

    domain: str = "source"
    style: str = "fill"
    background: float = 0.92
    palette: tuple = SOURCE_PALETTE
    noise: float = 0.02

    def __post_init__(self):
        if self.style not in ("fill", "outline"):
            raise InvalidSpecError(f"style must be 'fill' or 'outline', got {self.style!r}")
        if not 0.0 <= self.background <= 1.0:
            raise InvalidSpecError(f"background must be in [0, 1], got {self.background}")
        if self.noise < 0:
            raise InvalidSpecError(f"noise amplitude must be >= 0, got {self.noise}")
        if not self.palette:
            raise InvalidSpecError("palette must not be empty")


def default_source_spec() -> DomainSpec:
    return DomainSpec()


def default_target_spec() -> DomainSpec:
    return DomainSpec(domain="target", style="outline", background=0.12,
                      palette=TARGET_PALETTE, noise=0.10)


@dataclass
class Dataset:
    images: np.ndarray             # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray | None      # (n,) int64, absent for unlabeled views
    domain: str = "source"
    class_names: list = field(default_factory=lambda: list(SHAPE_NAMES))

    def __len__(self):
        return self.images.shape[0]

    def unlabeled(self) -> "Dataset":
        return Dataset(self.images, None, self.domain, list(self.class_names))


# ---------------------------------------------------------------------------
# signed-distance shape geometry
# ---------------------------------------------------------------------------


def _box(px, py, hx, hy):
    qx = np.abs(px) - hx
    qy = np.abs(py) - hy
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside


def _sdf(class_id, px, py):
    name = SHAPE_NAMES[class_id]
    if name == "disk":
        return np.hypot(px, py) - 0.85
    if name == "square":
        return _box(px, py, 0.72, 0.72)
    if name == "triangle":
        # equilateral triangle pointing up, circumradius ~0.95
        k = np.sqrt(3.0)
        x = np.abs(px)
        y = -py + 0.45
        rot = x + k * y > 0
        x2 = np.where(rot, (x - k * y) / 2.0, x)
        y2 = np.where(rot, (-k * x - y) / 2.0, y)
        x3 = np.clip(x2, -0.95, 0.95)
        return -np.hypot(x2 - x3, y2) * np.sign(y2)
    if name == "cross":
        return np.minimum(_box(px, py, 0.9, 0.28), _box(px, py, 0.28, 0.9))
    if name == "ring":
        return np.abs(np.hypot(px, py) - 0.62) - 0.24
    if name == "bar":
        return _box(px, py, 0.9, 0.22)
    if name == "ell":
        vertical = _box(px + 0.42, py, 0.22, 0.85)
        horizontal = _box(px - 0.05, py - 0.63, 0.7, 0.22)
        return np.minimum(vertical, horizontal)
    if name == "dot_grid":
        d = np.full_like(px, np.inf)
        for cx in (-0.6, 0.0, 0.6):
            for cy in (-0.6, 0.0, 0.6):
                d = np.minimum(d, np.hypot(px - cx, py - cy) - 0.2)
        return d
    raise InvalidSpecError(f"no geometry for class id {class_id}")


@dataclass(frozen=True)
class Pose:
    cx: float
    cy: float
    scale: float
    angle: float
    color_index: int
    background_jitter: float


def sample_pose(rng, palette_size: int) -> Pose:
    return Pose(cx=float(rng.uniform(-0.22, 0.22)),
                cy=float(rng.uniform(-0.22, 0.22)),
                scale=float(rng.uniform(0.42, 0.68)),
                angle=float(rng.uniform(0.0, 2.0 * np.pi)),
                color_index=int(rng.integers(palette_size)),
                background_jitter=float(rng.uniform(-0.04, 0.04)))


def render_shape(class_id: int, pose: Pose, spec: DomainSpec, image_size: int = 32,
                 rng=None) -> np.ndarray:
    """Rasterize one (class, pose) under a domain style; (3, H, W) in [0, 1]."""
    s = image_size
    coords = (np.arange(s) + 0.5) / s * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    ca, sa = np.cos(pose.angle), np.sin(pose.angle)
    px = (ca * (xx - pose.cx) + sa * (yy - pose.cy)) / pose.scale
    py = (-sa * (xx - pose.cx) + ca * (yy - pose.cy)) / pose.scale
    d_px = _sdf(class_id, px, py) * pose.scale * (s / 2.0)

    if spec.style == "fill":
        alpha = np.clip(0.5 - d_px, 0.0, 1.0)
    else:
        stroke = 0.85
        alpha = np.clip(0.5 - (np.abs(d_px) - stroke), 0.0, 1.0)

    bg = np.clip(spec.background + pose.background_jitter, 0.0, 1.0)
    color = np.asarray(spec.palette[pose.color_index % len(spec.palette)])
    img = bg + alpha[None, :, :] * (color[:, None, None] - bg)
    if spec.noise > 0 and rng is not None:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(classes: int, per_class: int, spec: DomainSpec, seed: int,
                       image_size: int = 32) -> Dataset:
    """Balanced labeled dataset of rendered shapes, deterministic per seed."""
    if classes < 2 or classes > len(SHAPE_NAMES):
        raise InvalidSpecError(
            f"classes must be in [2, {len(SHAPE_NAMES)}], got {classes}")
    if per_class < 1:
        raise InvalidSpecError(f"per_class must be >= 1, got {per_class}")

    images = np.empty((classes * per_class, 3, image_size, image_size), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    i = 0
    for c in range(classes):
        for j in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence((seed, c, j)))
            pose = sample_pose(rng, len(spec.palette))
            images[i] = render_shape(c, pose, spec, image_size, rng=rng)
            labels[i] = c
            i += 1
    order = np.random.default_rng(np.random.SeedSequence((seed, 0xD5))).permutation(i)
    return Dataset(images=images[order], labels=labels[order], domain=spec.domain,
                   class_names=list(SHAPE_NAMES[:classes]))


# ---------------------------------------------------------------------------
# persistence: manifest.json + images.bin + labels.csv
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, c, h, w = dataset.images.shape
    manifest = {
        "version": 1,
        "count": n,
        "channels": c,
        "height": h,
        "width": w,
        "classes": list(dataset.class_names),
        "has_labels": dataset.labels is not None,
        "domain": dataset.domain,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    with open(path / "images.bin", "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
    if dataset.labels is not None:
        with open(path / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label"])
            for i, lab in enumerate(dataset.labels):
                writer.writerow([i, int(lab)])


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptManifestError(f"manifest.json is not valid JSON: {exc}") from exc
    required = {"version", "count", "channels", "height", "width", "classes", "has_labels"}
    missing = required - manifest.keys()
    if missing:
        raise CorruptManifestError(f"manifest missing fields: {sorted(missing)}")

    n, c = manifest["count"], manifest["channels"]
    h, w = manifest["height"], manifest["width"]
    raw = (path / "images.bin").read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise MagicMismatchError(
            f"expected magic {DATASET_MAGIC!r}, found {raw[:4]!r}")
    payload = raw[4:]
    expected = n * c * h * w * 4
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, manifest implies {expected}")
    images = np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w).copy()

    labels = None
    if manifest["has_labels"]:
        labels_path = path / "labels.csv"
        if not labels_path.exists():
            raise CorruptManifestError("manifest declares labels but labels.csv is missing")
        labels = np.empty(n, dtype=np.int64)
        with open(labels_path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            count = 0
            for row in reader:
                labels[int(row[0])] = int(row[1])
                count += 1
        if count != n:
            raise CorruptManifestError(f"labels.csv lists {count} rows, expected {n}")
    return Dataset(images=images, labels=labels,
                   domain=manifest.get("domain", "source"),
                   class_names=list(manifest["classes"]))


# ---------------------------------------------------------------------------
# light augmentation: flip, crop-resize, brightness jitter
# ---------------------------------------------------------------------------


def _bilinear_crop_resize(image: np.ndarray, crop_scale: float, off_x: float,
                          off_y: float) -> np.ndarray:
    """Resample a crop back to full size; identity at scale 1, offset 0."""
    c, h, w = image.shape
    ch, cw = crop_scale * h, crop_scale * w
    oy = off_y * (h - ch)
    ox = off_x * (w - cw)
    ys = oy + (np.arange(h) + 0.5) * ch / h - 0.5
    xs = ox + (np.arange(w) + 0.5) * cw / w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def augment_with_params(image: np.ndarray, flip: bool, crop_scale: float,
                        off_x: float, off_y: float, brightness: float) -> np.ndarray:
    out = np.asarray(image)
    if flip:
        out = out[:, :, ::-1]
    out = _bilinear_crop_resize(out, crop_scale, off_x, off_y)
    if brightness != 0.0:
        out = out + brightness
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(image: np.ndarray, seed) -> np.ndarray:
    """Horizontal flip (p=0.5), crop-resize (scale in [0.8, 1]), brightness
    jitter (within 0.2, clamped). Deterministic per seed; output stays in
    [0, 1]."""
    rng = np.random.default_rng(seed)
    return augment_with_params(
        image,
        flip=bool(rng.uniform() < 0.5),
        crop_scale=float(rng.uniform(0.8, 1.0)),
        off_x=float(rng.uniform()),
        off_y=float(rng.uniform()),
        brightness=float(rng.uniform(-0.2, 0.2)))


def augment_batch(images: np.ndarray, rng) -> np.ndarray:
    """Independently augment each image, drawing per-image seeds from rng."""
    seeds = rng.integers(0, 2 ** 63 - 1, size=images.shape[0])
    return np.stack([augment(img, int(s)) for img, s in zip(images, seeds)])
