"""shapes-kit: procedurally drawn shapes, plus PPM/CSV dataset I/O.

Images are generated as 8-bit grayscale replicated to three channels, so the
in-memory dataset is exactly what a PPM round trip gives back.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLASS_NAMES = ("disk", "square", "triangle", "cross", "ring", "stripes")
SUPERSAMPLE = 4


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64
    names: list

    def __len__(self):
        return len(self.labels)

    def floats(self) -> np.ndarray:
        return to_float(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], [self.names[i] for i in idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.asarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


def to_float(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / np.float32(255.0)


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _inside(kind: str, u: np.ndarray, v: np.ndarray, s: float, phase: float) -> np.ndarray:
    """Membership test in shape-local coordinates (u, v), size s."""
    if kind == "disk":
        return u * u + v * v <= s * s
    if kind == "square":
        half = 0.85 * s
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        # equilateral, circumradius s, one vertex on -v
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = 2 * np.pi * k / 3 + np.pi / 2
            inside &= u * np.cos(a) + v * np.sin(a) <= s / 2
        return inside
    if kind == "cross":
        arm = 0.3 * s
        return ((np.abs(u) <= s) & (np.abs(v) <= arm)) | ((np.abs(v) <= s) & (np.abs(u) <= arm))
    if kind == "ring":
        rr = u * u + v * v
        return (rr <= s * s) & (rr >= (0.55 * s) ** 2)
    if kind == "stripes":
        period = s / 2.0
        box = (np.abs(u) <= s) & (np.abs(v) <= s)
        return box & (np.cos(2 * np.pi * u / period + phase) > 0)
    raise ValueError(f"unknown shape {kind!r}")


@dataclass(frozen=True)
class ShapeStyle:
    """Pose and contrast ranges for drawn shapes (fractions of the image side, radians)."""

    scale: tuple = (0.22, 0.30)
    max_rotation: float = np.pi / 6
    background: tuple = (0.05, 0.40)
    foreground: tuple = (0.60, 0.95)
    noise: float = 0.05


def draw_shape(kind: str, size: int, rng: np.random.Generator, style: ShapeStyle = ShapeStyle()) -> np.ndarray:
    """One (size, size, 3) uint8 image of ``kind`` with random pose and contrast."""
    s = rng.uniform(*style.scale) * size
    margin = s + 2
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    theta = rng.uniform(-style.max_rotation, style.max_rotation)
    phase = rng.uniform(0, 2 * np.pi)
    bg = rng.uniform(*style.background)
    fg = rng.uniform(*style.foreground)

    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    c, sn = np.cos(theta), np.sin(theta)
    u = c * dx + sn * dy
    v = -sn * dx + c * dy
    cover = _inside(kind, u, v, s, phase).astype(np.float64)
    cover = cover.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    img = bg + (fg - bg) * cover
    img = img + rng.uniform(-style.noise, style.noise, size=img.shape)
    gray = to_uint8(img)
    return np.repeat(gray[:, :, None], 3, axis=2)


def generate(per_class: int, size: int = 64, seed: int = 0, classes: int = 6,
             split: str = "train", style: ShapeStyle = ShapeStyle()) -> Dataset:
    """Deterministic shapes-kit split; classes are interleaved."""
    if not 2 <= classes <= len(CLASS_NAMES):
        raise ValueError(f"classes must be in [2, {len(CLASS_NAMES)}], got {classes}")
    split_key = {"train": 0, "test": 1}.get(split, sum(map(ord, split)))
    rng = np.random.default_rng([seed, split_key])
    images, labels, names = [], [], []
    for i in range(per_class):
        for k in range(classes):
            images.append(draw_shape(CLASS_NAMES[k], size, rng, style))
            labels.append(k)
            names.append(f"{split}_{len(names):05d}_{CLASS_NAMES[k]}.ppm")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), names)


# ---------------------------------------------------------------------------
# PPM / CSV


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def _tokens(buf: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (comments skipped) and the body offset."""
    out, pos = [], 0
    while len(out) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(w), int(h)
    body = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    return body.reshape(h, w, 3).copy()


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, img in zip(ds.names, ds.images):
        write_ppm(d / name, img)
    with open(d / "labels.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["filename", "label"])
        for name, label in zip(ds.names, ds.labels):
            w.writerow([name, int(label)])
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    labels_path = d / "labels.csv"
    if not labels_path.exists():
        raise FileNotFoundError(f"no labels.csv in {d}")
    names, labels = [], []
    with open(labels_path, newline="") as f:
        for row in csv.DictReader(f):
            names.append(row["filename"])
            labels.append(int(row["label"]))
    images = np.stack([read_ppm(d / n) for n in names]) if names else np.zeros((0, 1, 1, 3), np.uint8)
    return Dataset(images, np.asarray(labels, dtype=np.int64), names)
