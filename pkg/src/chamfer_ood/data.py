"""Dataset ingestion, normalization, and synthesized OOD sources.

Images are numpy float32 arrays of shape (H, W, C) with values in [0, 1];
batches stack them as (N, H, W, C). Any model-specific standardization happens
inside model forward passes, never here.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PilImage
from PIL import ImageDraw, ImageFont

from .exceptions import ArgumentError, ConfigurationError, IngestionError, ShapeError
from .rng import RngState

DATA_ROOT_ENV = "CHAMFER_OOD_DATA"

PROVENANCES = ("indist", "noise", "uniform", "seed", "code", "adversarial")
SPLITS = ("train", "test")

# luminance weights for RGB -> gray conversion
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def check_images(images: np.ndarray) -> np.ndarray:
    """Validate an (N, H, W, C) image stack: float, unit range, C in {1, 3}."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ShapeError(f"expected (N, H, W, C) images, got shape {images.shape}")
    n, h, w, c = images.shape
    if n == 0 or h <= 0 or w <= 0 or c not in (1, 3):
        raise ShapeError(f"invalid image stack shape {images.shape}; C must be 1 or 3")
    if not np.isfinite(images).all():
        raise ArgumentError("images contain non-finite values")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ArgumentError(
            f"pixel values outside [0, 1]: min={images.min():.4g} max={images.max():.4g}"
        )
    return images


@dataclass
class ImageBatch:
    """A uniform-shape stack of images with a provenance tag."""

    images: np.ndarray
    provenance: str

    def __post_init__(self):
        self.images = check_images(self.images)
        if self.provenance not in PROVENANCES:
            raise ArgumentError(f"unknown provenance {self.provenance!r}; expected one of {PROVENANCES}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class LabeledDataset:
    """Images plus integer class labels in [0, K)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str
    name: str

    def __post_init__(self):
        self.images = check_images(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise ArgumentError(
                f"labels length {self.labels.shape} does not match {len(self.images)} images"
            )
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ArgumentError(
                f"labels outside [0, {self.num_classes}): range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        if self.split == "train" and len(np.unique(self.labels)) != self.num_classes:
            raise ArgumentError(f"train split of {self.name!r} does not reference every class")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def batch(self) -> ImageBatch:
        return ImageBatch(self.images, "indist")


def data_root(root: str | os.PathLike | None = None) -> Path:
    """Resolve the dataset root: explicit argument, else $CHAMFER_OOD_DATA, else ./data."""
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


# ---------------------------------------------------------------------------
# Archive readers (standard published formats)
# ---------------------------------------------------------------------------

def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path: Path) -> np.ndarray:
    """Read one IDX file (the MNIST-family archive format, big-endian)."""
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    try:
        with _open_maybe_gz(path) as f:
            header = f.read(4)
            if len(header) != 4 or header[0] != 0 or header[1] != 0:
                raise IngestionError(f"bad IDX magic in {path}")
            dtype_code, ndim = header[2], header[3]
            if dtype_code != 0x08:
                raise IngestionError(f"unsupported IDX dtype 0x{dtype_code:02x} in {path}")
            dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
            data = np.frombuffer(f.read(), dtype=np.uint8)
    except OSError as exc:
        raise IngestionError(f"failed reading {path}: {exc}") from exc
    expected = int(np.prod(dims))
    if data.size != expected:
        raise IngestionError(f"truncated IDX file {path}: {data.size} bytes, expected {expected}")
    return data.reshape(dims)


def _load_idx_pair(root: Path, images_name: str, labels_name: str) -> tuple[np.ndarray, np.ndarray]:
    def find(stem: str) -> Path:
        for candidate in (root / stem, root / f"{stem}.gz"):
            if candidate.exists():
                return candidate
        raise IngestionError(f"dataset file not found: {root / stem}[.gz]")

    images = read_idx(find(images_name))
    labels = read_idx(find(labels_name))
    if images.ndim != 3:
        raise IngestionError(f"expected 3-d image archive, got shape {images.shape}")
    return images[..., None].astype(np.float32) / 255.0, labels.astype(np.int64)


def read_cifar_batches(paths: list[Path], num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Read CIFAR-style binary batches: per record 1 label byte + 3072 plane-major pixels."""
    record = 1 + 3072
    all_images, all_labels = [], []
    for path in paths:
        if not path.exists():
            raise IngestionError(f"dataset file not found: {path}")
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if raw.size == 0 or raw.size % record != 0:
            raise IngestionError(f"corrupt CIFAR batch {path}: {raw.size} bytes")
        raw = raw.reshape(-1, record)
        all_labels.append(raw[:, 0].astype(np.int64))
        pixels = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        all_images.append(pixels.astype(np.float32) / 255.0)
    images = np.concatenate(all_images)
    labels = np.concatenate(all_labels)
    if labels.max() >= num_classes:
        raise IngestionError(f"label {labels.max()} out of range for {num_classes} classes")
    return images, labels


# ---------------------------------------------------------------------------
# Synthetic glyph datasets (self-contained stand-ins, no downloads required)
# ---------------------------------------------------------------------------

_SYNTH_TRAIN_N = 10_000
_SYNTH_TEST_N = 2_000


def _render_glyph(char: str, size: int, font_px: int, angle: float, dx: int, dy: int) -> np.ndarray:
    canvas = PilImage.new("L", (size * 2, size * 2), 0)
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default(size=font_px)
    draw.text((size // 2 + dx, size // 2 + dy - font_px // 4), char, fill=255, font=font)
    canvas = canvas.rotate(angle, resample=PilImage.BILINEAR, center=(size, size))
    box = (size // 2, size // 2, size // 2 + size, size // 2 + size)
    return np.asarray(canvas.crop(box), dtype=np.uint8)


def _synth_glyphs(chars: str, n: int, rng: RngState, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    gen = rng.generator()
    labels = np.arange(n) % len(chars)
    gen.shuffle(labels)
    images = np.empty((n, size, size, 1), dtype=np.uint8)
    for i, lab in enumerate(labels):
        font_px = int(gen.integers(14, 23))
        angle = float(gen.uniform(-25.0, 25.0))
        dx = int(gen.integers(-3, 4))
        dy = int(gen.integers(-3, 4))
        images[i, :, :, 0] = _render_glyph(chars[lab], size, font_px, angle, dx, dy)
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


def _synth_shapes(n: int, rng: RngState, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    # ten shape classes, each with a class-specific hue band and jittered geometry
    gen = rng.generator()
    labels = np.arange(n) % 10
    gen.shuffle(labels)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    for i, lab in enumerate(labels):
        canvas = PilImage.new("RGB", (size, size), tuple(int(v) for v in gen.integers(0, 60, 3)))
        draw = ImageDraw.Draw(canvas)
        cx, cy = (int(v) for v in gen.integers(size // 3, 2 * size // 3, 2))
        r = int(gen.integers(size // 5, size // 3))
        base = np.zeros(3)
        base[lab % 3] = 160 + 12 * (lab // 3)
        color = tuple(int(np.clip(v, 0, 255)) for v in base + gen.integers(0, 80, 3))
        kind = lab % 5
        if kind == 0:
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
        elif kind == 1:
            draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=color)
        elif kind == 2:
            draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
        elif kind == 3:
            w = max(2, r // 2)
            draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=color)
            draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=color)
        else:
            draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=color)
        images[i] = np.asarray(canvas, dtype=np.uint8)
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


_SYNTH_SEED = 20240  # fixed: synthetic sets are datasets, not draws


def _synth_dataset(name: str, split: str) -> tuple[np.ndarray, np.ndarray, int]:
    n = _SYNTH_TRAIN_N if split == "train" else _SYNTH_TEST_N
    stream = {"train": 1, "test": 2}[split]
    rng = RngState(_SYNTH_SEED, stream)
    if name == "synth_digits":
        images, labels = _synth_glyphs("0123456789", n, rng.child(0))
    elif name == "synth_letters":
        images, labels = _synth_glyphs("ABCDEFGHJK", n, rng.child(1))
    elif name == "synth_shapes":
        images, labels = _synth_shapes(n, rng.child(2))
    else:  # pragma: no cover - guarded by load_dataset
        raise ConfigurationError(f"unknown synthetic dataset {name!r}")
    return images, labels, 10


def _synth_cached(name: str, split: str, root: Path) -> tuple[np.ndarray, np.ndarray, int]:
    cache = root / "synth" / f"{name}.{split}.npz"
    if cache.exists():
        payload = np.load(cache)
        return payload["images"], payload["labels"], int(payload["num_classes"])
    images, labels, k = _synth_dataset(name, split)
    try:
        cache.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache.with_suffix(".tmp.npz")
        np.savez_compressed(tmp, images=images, labels=labels, num_classes=k)
        tmp.replace(cache)
    except OSError:
        pass  # cache is an optimization only
    return images, labels, k


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

_IDX_FILES = {
    "mnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
              "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    "fmnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    "emnist": ("emnist-letters-train-images-idx3-ubyte", "emnist-letters-train-labels-idx1-ubyte",
               "emnist-letters-test-images-idx3-ubyte", "emnist-letters-test-labels-idx1-ubyte"),
}

SYNTH_DATASETS = ("synth_digits", "synth_letters", "synth_shapes")
KNOWN_DATASETS = tuple(_IDX_FILES) + ("cifar10",) + SYNTH_DATASETS


def load_dataset(name: str, split: str, root: str | os.PathLike | None = None) -> LabeledDataset:
    """Load a dataset by name with pixels normalized to [0, 1].

    Archive-backed names (mnist, fmnist, emnist, cifar10) read the standard
    published files under the data root (see scripts/fetch_data.py); synthetic
    names are generated deterministically and cached there.
    """
    if split not in SPLITS:
        raise ConfigurationError(f"unsupported split {split!r}; expected one of {SPLITS}")
    root_path = data_root(root)
    if name in SYNTH_DATASETS:
        images, labels, k = _synth_cached(name, split, root_path)
    elif name in _IDX_FILES:
        train_i, train_l, test_i, test_l = _IDX_FILES[name]
        pair = (train_i, train_l) if split == "train" else (test_i, test_l)
        images, labels = _load_idx_pair(root_path / name, *pair)
        k = int(labels.max()) + 1
        if labels.min() == 1:  # emnist letters are 1-indexed in the published archives
            labels = labels - 1
            k -= 1
    elif name == "cifar10":
        folder = root_path / "cifar10"
        if split == "train":
            paths = [folder / f"data_batch_{i}.bin" for i in range(1, 6)]
        else:
            paths = [folder / "test_batch.bin"]
        images, labels = read_cifar_batches(paths)
        k = 10
    else:
        raise ConfigurationError(f"unknown dataset {name!r}; known: {', '.join(KNOWN_DATASETS)}")
    return LabeledDataset(images, labels, k, split, name)


def subsample(dataset: LabeledDataset, n: int, rng: RngState) -> LabeledDataset:
    """Deterministic class-stratified subset of size n."""
    if not 0 < n <= len(dataset):
        raise ArgumentError(f"cannot take {n} items from {len(dataset)}")
    gen = rng.generator()
    per_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    picks: list[np.ndarray] = []
    remaining = n
    for c, idx in enumerate(per_class):
        share = min(len(idx), round(n * len(idx) / len(dataset)))
        share = min(share, remaining - (dataset.num_classes - 1 - c))  # leave room for later classes
        share = max(share, 1) if remaining > 0 else 0
        picks.append(gen.choice(idx, size=share, replace=False))
        remaining -= share
    order = np.sort(np.concatenate(picks)[:n] if remaining <= 0 else np.concatenate(picks))
    return LabeledDataset(dataset.images[order], dataset.labels[order],
                          dataset.num_classes, dataset.split, dataset.name)


# ---------------------------------------------------------------------------
# Non-dataset OOD sources
# ---------------------------------------------------------------------------

def make_noise_ood(dataset: LabeledDataset, n: int, rng: RngState, replace: bool = False) -> ImageBatch:
    """Permuted-pixel noise: each output is a pixel-position shuffle of one source image.

    Positions are permuted jointly across channels, so every pixel moves as a
    C-vector and the per-image value multiset is preserved exactly.
    """
    if n <= 0:
        raise ArgumentError(f"n must be positive, got {n}")
    if n > len(dataset) and not replace:
        raise ArgumentError(f"n={n} exceeds dataset size {len(dataset)}; pass replace=True to allow")
    gen = rng.generator()
    picks = gen.choice(len(dataset), size=n, replace=replace)
    h, w, c = dataset.image_shape
    out = np.empty((n, h, w, c), dtype=np.float32)
    for i, src in enumerate(picks):
        perm = gen.permutation(h * w)
        out[i] = dataset.images[src].reshape(h * w, c)[perm].reshape(h, w, c)
    return ImageBatch(out, "noise")


def make_uniform_ood(shape: tuple[int, int, int], n: int, rng: RngState) -> ImageBatch:
    """I.i.d. uniform noise over the unit box, one image per draw."""
    h, w, c = shape
    if n <= 0 or h <= 0 or w <= 0 or c not in (1, 3):
        raise ArgumentError(f"invalid uniform batch request: shape={shape}, n={n}")
    gen = rng.generator()
    return ImageBatch(gen.random((n, h, w, c), dtype=np.float32), "uniform")


def holdout_class(dataset: LabeledDataset, class_id: int) -> tuple[LabeledDataset, ImageBatch]:
    """Split one class out as OOD; remaining labels are remapped order-preservingly."""
    if not 0 <= class_id < dataset.num_classes:
        raise ArgumentError(f"class_id {class_id} out of range [0, {dataset.num_classes})")
    held = dataset.labels == class_id
    kept_labels = dataset.labels[~held]
    remapped = np.where(kept_labels > class_id, kept_labels - 1, kept_labels)
    kept = LabeledDataset(dataset.images[~held], remapped, dataset.num_classes - 1,
                          dataset.split, f"{dataset.name}-holdout{class_id}")
    return kept, ImageBatch(dataset.images[held], "indist")


# ---------------------------------------------------------------------------
# Shape/color adapters for cross-dataset evaluation
# ---------------------------------------------------------------------------

def to_grayscale(images: np.ndarray) -> np.ndarray:
    """Luminance-weighted RGB -> single channel; grayscale input passes through."""
    images = check_images(images)
    if images.shape[-1] == 1:
        return images
    return np.clip(images @ _LUMA, 0.0, 1.0)[..., None].astype(np.float32)


def resize_images(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an image stack (used when evaluating across dataset shapes)."""
    images = check_images(images)
    if images.shape[1] == height and images.shape[2] == width:
        return images
    out = np.empty((images.shape[0], height, width, images.shape[3]), dtype=np.float32)
    for i, img in enumerate(images):
        arr = (img * 255).astype(np.uint8)
        pil = PilImage.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr)
        resized = np.asarray(pil.resize((width, height), PilImage.BILINEAR), dtype=np.float32) / 255.0
        out[i] = resized[..., None] if resized.ndim == 2 else resized
    return out


def adapt_batch(images: np.ndarray, target_shape: tuple[int, int, int]) -> np.ndarray:
    """Convert an image stack to the target (H, W, C) by grayscale conversion and resizing."""
    h, w, c = target_shape
    images = check_images(images)
    if c == 1 and images.shape[-1] == 3:
        images = to_grayscale(images)
    elif c == 3 and images.shape[-1] == 1:
        images = np.repeat(images, 3, axis=-1)
    return resize_images(images, h, w)
