"""Seed OOD example generation by slicing images into patch grids and splicing
patches from differently-labeled sources back into one image."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledDataset, check_images
from .exceptions import ArgumentError, ConstraintError, ShapeError
from .rng import RngState

DISTINCTNESS_MODES = ("pairwise", "not_all_equal")


@dataclass
class PatchGrid:
    """The k*k row-major patches of one image."""

    patches: np.ndarray  # (k*k, H/k, W/k, C)
    k: int
    source_id: int = -1

    def __post_init__(self):
        if self.patches.shape[0] != self.k * self.k:
            raise ArgumentError(f"expected {self.k * self.k} patches, got {self.patches.shape[0]}")


@dataclass
class SeedExample:
    """A spliced image whose patches come from sources that are not all one class."""

    image: np.ndarray
    k: int
    source_classes: list[int]
    source_ids: list[int]

    def __post_init__(self):
        if len(self.source_classes) != self.k * self.k or len(self.source_ids) != self.k * self.k:
            raise ArgumentError(f"need {self.k * self.k} source entries for k={self.k}")
        if len(set(self.source_classes)) == 1:
            raise ConstraintError("seed sources are all one class; the splice constraint forbids this")


def slice_image(image: np.ndarray, k: int) -> PatchGrid:
    """Divide an image into a k-by-k grid of equal patches, row-major."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ShapeError(f"expected (H, W, C) image, got shape {image.shape}")
    h, w, _ = image.shape
    if k < 1 or h % k != 0 or w % k != 0:
        raise ShapeError(f"image {h}x{w} is not divisible into a {k}x{k} grid")
    ph, pw = h // k, w // k
    patches = (
        image.reshape(k, ph, k, pw, -1).transpose(0, 2, 1, 3, 4).reshape(k * k, ph, pw, -1)
    )
    return PatchGrid(patches, k)


def splice_patches(patches: np.ndarray, k: int) -> np.ndarray:
    """Reassemble k*k equal patches (row-major) into one image; exact inverse of slice."""
    patches = np.asarray(patches, dtype=np.float32)
    if patches.ndim != 4:
        raise ShapeError(f"expected (k*k, ph, pw, C) patches, got shape {patches.shape}")
    if patches.shape[0] != k * k:
        raise ArgumentError(f"need {k * k} patches for k={k}, got {patches.shape[0]}")
    _, ph, pw, c = patches.shape
    return (
        patches.reshape(k, k, ph, pw, c).transpose(0, 2, 1, 3, 4).reshape(k * ph, k * pw, c)
    )


def generate_seeds(
    dataset: LabeledDataset,
    k: int,
    n: int,
    rng: RngState,
    distinctness: str | None = None,
) -> list[SeedExample]:
    """Draw n seed examples, patch t taken at grid position t of source image t.

    distinctness='pairwise' forces all k*k source classes distinct (needs
    K >= k*k); 'not_all_equal' only forbids a single shared class. Default is
    pairwise when the dataset allows it. Source images within one seed are
    drawn without replacement.
    """
    if n <= 0 or len(dataset) == 0:
        raise ArgumentError(f"cannot generate {n} seeds from {len(dataset)} images")
    if dataset.num_classes < 2:
        raise ConstraintError("seed generation needs at least 2 classes")
    kk = k * k
    if distinctness is None:
        distinctness = "pairwise" if dataset.num_classes >= kk else "not_all_equal"
    if distinctness not in DISTINCTNESS_MODES:
        raise ArgumentError(f"unknown distinctness mode {distinctness!r}")
    if distinctness == "pairwise" and dataset.num_classes < kk:
        raise ConstraintError(
            f"pairwise-distinct classes impossible: K={dataset.num_classes} < k*k={kk}"
        )
    h, w, _ = dataset.image_shape
    if h % k != 0 or w % k != 0:
        raise ShapeError(f"image {h}x{w} is not divisible into a {k}x{k} grid")

    gen = rng.generator()
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    seeds: list[SeedExample] = []
    for _ in range(n):
        if distinctness == "pairwise":
            classes = gen.choice(dataset.num_classes, size=kk, replace=False)
            ids = np.array([gen.choice(by_class[c]) for c in classes])
        else:
            ids = gen.choice(len(dataset), size=kk, replace=False)
            classes = dataset.labels[ids]
            while len(set(classes.tolist())) == 1:
                other = gen.choice(np.flatnonzero(dataset.labels != classes[0]))
                ids[gen.integers(kk)] = other
                classes = dataset.labels[ids]
        patches = np.stack([slice_image(dataset.images[i], k).patches[t] for t, i in enumerate(ids)])
        seeds.append(
            SeedExample(splice_patches(patches, k), k,
                        [int(c) for c in classes], [int(i) for i in ids])
        )
    return seeds


def seeds_to_array(seeds: list[SeedExample]) -> np.ndarray:
    if not seeds:
        raise ArgumentError("empty seed list")
    return check_images(np.stack([s.image for s in seeds]))


# ---------------------------------------------------------------------------
# Manifest persistence (exact arrays in npz, manifest records provenance)
# ---------------------------------------------------------------------------

def save_seed_manifest(seeds: list[SeedExample], out_dir: Path, dataset_name: str,
                       rng: RngState, distinctness: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out_dir / "images.npz", images=seeds_to_array(seeds))
    manifest = {
        "kind": "seeds",
        "dataset": dataset_name,
        "k": seeds[0].k,
        "n": len(seeds),
        "rng": {"seed": rng.seed, "stream": rng.stream},
        "distinctness": distinctness,
        "sampling": "without_replacement",
        "items": [
            {"index": i, "source_ids": s.source_ids, "source_classes": s.source_classes}
            for i, s in enumerate(seeds)
        ],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_seed_manifest(manifest_path: Path) -> tuple[np.ndarray, dict]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    images = np.load(manifest_path.parent / "images.npz")["images"]
    if manifest.get("kind") not in ("seeds", "codes"):
        raise ArgumentError(f"{manifest_path} is not a seed/code manifest")
    if images.shape[0] != manifest["n"]:
        raise ArgumentError(
            f"manifest {manifest_path} lists {manifest['n']} items but archive has {images.shape[0]}"
        )
    return check_images(images), manifest
