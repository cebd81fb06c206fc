"""Dataset ingestion, model persistence, and image/table export.

File formats (see docs/FORMATS.md for the byte layouts):
  * IDX          big-endian MNIST container, magics 2051 (images) / 2049 (labels)
  * model files  magic ``DNET``, JSON header, little-endian float64 payloads
  * image grids  binary PGM (P5), maxval 255
  * result CSV   fixed header, one aggregated row per (method, blackbox, norm)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import DenseNet, Layer

IMAGE_SIDE = 28
IMAGE_PIXELS = IMAGE_SIDE * IMAGE_SIDE
N_CLASSES = 10

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

MODEL_MAGIC = b"DNET"
MODEL_VERSION = 1

RESULTS_HEADER = (
    "method,blackbox,norm,fe_dist_mean,fe_dist_std,"
    "pixel_dist_mean,pixel_dist_std,opt_time_mean,opt_time_std,suc_rate"
)


class IdxError(ValueError):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, 784) floats in [0, 1]
    labels: np.ndarray  # (N,) ints in 0..9
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or self.images.shape[1] != IMAGE_PIXELS:
            raise ValueError(f"images must be (N, {IMAGE_PIXELS}), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must align with images")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], split=self.split)


# ---------------------------------------------------------------------------
# IDX

def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxTruncatedError(f"truncated IDX payload while reading {what}")
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair, scaling pixels to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">iiii", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(
                f"{images_path}: expected image magic {IDX_IMAGES_MAGIC}, found {magic}"
            )
        if (rows, cols) != (IMAGE_SIDE, IMAGE_SIDE):
            raise IdxError(f"{images_path}: expected {IMAGE_SIDE}x{IMAGE_SIDE} images, found {rows}x{cols}")
        raw = _read_exact(f, count * rows * cols, "image pixels")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(">ii", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(
                f"{labels_path}: expected label magic {IDX_LABELS_MAGIC}, found {magic}"
            )
        labels = np.frombuffer(_read_exact(f, lcount, "labels"), dtype=np.uint8)

    if lcount != count:
        raise IdxCountMismatchError(f"{count} images vs {lcount} labels")
    split = "train" if "train" in images_path.name else "test"
    return Dataset(pixels.astype(np.float64) / 255.0, labels.astype(np.int64), split=split)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a Dataset back out as an IDX pair (pixels quantized to bytes)."""
    pixels = np.clip(np.floor(dataset.images * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, len(dataset), IMAGE_SIDE, IMAGE_SIDE))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, len(dataset)))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic digits
#
# The pipeline is dataset-agnostic as long as images are 28x28 in [0,1]; this
# generator produces a fully deterministic stand-in (stroke-drawn digits with
# affine jitter and noise) so every stage can run where the real archive is
# unavailable. Real IDX files take precedence everywhere they exist.

_SEG_POINTS = {
    "A": ((0.15, 0.12), (0.85, 0.12)),
    "B": ((0.85, 0.12), (0.85, 0.50)),
    "C": ((0.85, 0.50), (0.85, 0.88)),
    "D": ((0.15, 0.88), (0.85, 0.88)),
    "E": ((0.15, 0.50), (0.15, 0.88)),
    "F": ((0.15, 0.12), (0.15, 0.50)),
    "G": ((0.15, 0.50), (0.85, 0.50)),
}

_DIGIT_SEGMENTS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABGED",
    3: "ABGCD",
    4: "FGBC",
    5: "AFGCD",
    6: "AFGECD",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCFGD",
}

_GRID = np.stack(
    np.meshgrid(np.arange(IMAGE_SIDE, dtype=np.float64), np.arange(IMAGE_SIDE, dtype=np.float64)),
    axis=-1,
)  # (28, 28, 2) of (col, row)


def _render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(-0.20, 0.20)
    scale = rng.uniform(0.80, 1.05) * IMAGE_SIDE
    shear = rng.uniform(-0.20, 0.20)
    shift = rng.uniform(-2.0, 2.0, size=2) + IMAGE_SIDE / 2.0
    width = rng.uniform(0.85, 1.35)
    amp = rng.uniform(0.75, 1.0)

    cos_a, sin_a = np.cos(angle), np.sin(angle)
    transform = np.array([[cos_a, -sin_a], [sin_a, cos_a]]) @ np.array([[1.0, shear], [0.0, 1.0]])

    img = np.zeros((IMAGE_SIDE, IMAGE_SIDE))
    for seg in _DIGIT_SEGMENTS[digit]:
        (x0, y0), (x1, y1) = _SEG_POINTS[seg]
        p0 = transform @ (np.array([x0, y0]) - 0.5) * scale + shift
        p1 = transform @ (np.array([x1, y1]) - 0.5) * scale + shift
        p0 += rng.uniform(-0.7, 0.7, size=2)
        p1 += rng.uniform(-0.7, 0.7, size=2)
        d = p1 - p0
        len_sq = max(float(d @ d), 1e-9)
        t = np.clip(((_GRID - p0) @ d) / len_sq, 0.0, 1.0)
        closest = p0 + t[..., None] * d
        dist_sq = np.sum((_GRID - closest) ** 2, axis=-1)
        img = np.maximum(img, amp * np.exp(-dist_sq / (2.0 * width**2)))

    img += rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthesize_digits(n: int, seed: int, split: str = "train") -> Dataset:
    """Deterministic MNIST-shaped stand-in: n stroke-drawn digits, balanced classes."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, N_CLASSES, size=n)
    images = np.empty((n, IMAGE_PIXELS))
    for i, lab in enumerate(labels):
        images[i] = _render_digit(int(lab), rng).reshape(-1)
    return Dataset(images, labels, split=split)


def find_mnist(data_dir=None) -> tuple[Path, Path, Path, Path] | None:
    """Locate real IDX files if present; returns (train-img, train-lab, test-img, test-lab)."""
    import os

    candidates = []
    if data_dir is not None:
        candidates.append(Path(data_dir))
    if os.environ.get("DPMDCE_MNIST_DIR"):
        candidates.append(Path(os.environ["DPMDCE_MNIST_DIR"]))
    candidates += [Path("data/mnist"), Path.home() / "data" / "mnist"]
    names = [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ]
    for root in candidates:
        paths = [root / n for pair in names for n in pair]
        if all(p.exists() for p in paths):
            return tuple(paths)  # type: ignore[return-value]
    return None


def load_or_synthesize(split: str, n_synth: int, seed: int, data_dir=None) -> Dataset:
    found = find_mnist(data_dir)
    if found is not None:
        tr_img, tr_lab, te_img, te_lab = found
        if split == "train":
            return load_idx(tr_img, tr_lab)
        return load_idx(te_img, te_lab)
    # different seed stream per split so train/test never overlap
    return synthesize_digits(n_synth, seed + (0 if split == "train" else 101), split=split)


# ---------------------------------------------------------------------------
# model files

def save_model(path, net: DenseNet) -> None:
    net.validate()
    header = {
        "role": net.role,
        "activations": [l.activation for l in net.layers],
        "shapes": [[l.out_dim, l.in_dim] for l in net.layers],
        "meta": net.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", MODEL_VERSION, len(blob)))
        f.write(blob)
        for layer in net.layers:
            f.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def load_model(path) -> DenseNet:
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model format version {version}")
    raw_header = buf.read(hlen)
    if len(raw_header) != hlen:
        raise ModelFormatError(f"{path}: truncated header (expected {hlen} bytes)")
    try:
        header = json.loads(raw_header)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: corrupt header: {exc}") from exc

    layers = []
    for (out_dim, in_dim), act in zip(header["shapes"], header["activations"]):
        wbytes = buf.read(out_dim * in_dim * 8)
        bbytes = buf.read(out_dim * 8)
        if len(wbytes) != out_dim * in_dim * 8 or len(bbytes) != out_dim * 8:
            raise ModelFormatError(f"{path}: truncated parameter payload")
        w = np.frombuffer(wbytes, dtype="<f8").reshape(out_dim, in_dim).copy()
        b = np.frombuffer(bbytes, dtype="<f8").copy()
        layers.append(Layer(w, b, act))
    if buf.read(1):
        raise ModelFormatError(f"{path}: trailing bytes after parameter payload")
    try:
        return DenseNet(layers, role=header["role"], meta=header.get("meta", {}))
    except ValueError as exc:
        raise ModelFormatError(f"{path}: inconsistent shapes: {exc}") from exc


# ---------------------------------------------------------------------------
# image grids

def _to_byte(img: np.ndarray) -> np.ndarray:
    # clamp then round half-up, so 0.5 -> 128
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_image_grid(images, path, n_cols: int | None = None, gutter: int = 2) -> None:
    """Write a row-major grid of 28x28 images as a binary PGM.

    ``images`` is a list of rows (methods) each holding equal-length lists of
    images (instances), or a flat list with ``n_cols`` set.
    """
    if not images:
        raise ValueError("no images to export")
    if n_cols is not None:
        flat = list(images)
        rows = [flat[i : i + n_cols] for i in range(0, len(flat), n_cols)]
    else:
        rows = [list(r) for r in images]
    n_rows, n_cols = len(rows), len(rows[0])
    if any(len(r) != n_cols for r in rows):
        raise ValueError("ragged image grid")

    height = n_rows * IMAGE_SIDE + (n_rows - 1) * gutter
    width = n_cols * IMAGE_SIDE + (n_cols - 1) * gutter
    canvas = np.zeros((height, width), dtype=np.uint8)
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            img = np.asarray(img, dtype=np.float64).reshape(IMAGE_SIDE, IMAGE_SIDE)
            top = r * (IMAGE_SIDE + gutter)
            left = c * (IMAGE_SIDE + gutter)
            canvas[top : top + IMAGE_SIDE, left : left + IMAGE_SIDE] = _to_byte(img)

    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(canvas.tobytes())


# ---------------------------------------------------------------------------
# result tables

@dataclass
class ResultRow:
    method: str
    blackbox: str
    norm: str
    fe_dist_mean: float
    fe_dist_std: float
    pixel_dist_mean: float
    pixel_dist_std: float
    opt_time_mean: float
    opt_time_std: float
    suc_rate: float

    FIELDS = (
        "method",
        "blackbox",
        "norm",
        "fe_dist_mean",
        "fe_dist_std",
        "pixel_dist_mean",
        "pixel_dist_std",
        "opt_time_mean",
        "opt_time_std",
        "suc_rate",
    )


def write_results(rows, path) -> None:
    """Aggregated benchmark table; values written with full float precision."""
    lines = [RESULTS_HEADER]
    for row in rows:
        values = []
        for name in ResultRow.FIELDS:
            v = getattr(row, name)
            values.append(v if isinstance(v, str) else repr(float(v)))
        lines.append(",".join(values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_results(path) -> list[ResultRow]:
    lines = Path(path).read_text(encoding="ascii").strip().splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise ValueError(f"{path}: unexpected results header")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(ResultRow(parts[0], parts[1], parts[2], *map(float, parts[3:])))
    return rows
