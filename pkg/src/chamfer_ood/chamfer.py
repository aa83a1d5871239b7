"""Chamfer distance between two images' pixel-value multisets.

Pixels are compared as C-dimensional value vectors; spatial position is
ignored, so the distance is zero exactly when one image is a pixel
rearrangement of the other.
"""

from __future__ import annotations

import numpy as np
import torch

from .exceptions import ShapeError


def _pixel_set(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected (H, W, C) image, got shape {image.shape}")
    return image.reshape(-1, image.shape[-1])


def _nearest_sq_dists_1d(a: np.ndarray, b_sorted: np.ndarray) -> np.ndarray:
    # values only; tie direction is irrelevant to the distances themselves
    pos = np.searchsorted(b_sorted, a)
    left = b_sorted[np.clip(pos - 1, 0, len(b_sorted) - 1)]
    right = b_sorted[np.clip(pos, 0, len(b_sorted) - 1)]
    return np.minimum((a - left) ** 2, (a - right) ** 2)


def _nearest_indices(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # brute force over all pairs; ties resolve to the first index in b
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def chamfer_loss(xhat: np.ndarray, xbar: np.ndarray) -> float:
    """Symmetric sum of squared nearest-neighbor distances between pixel sets.

    Zero iff the two images hold identical pixel-value multisets (in any
    spatial arrangement); symmetric in its arguments; always nonnegative.
    """
    a, b = _pixel_set(xhat), _pixel_set(xbar)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {xhat.shape} vs {xbar.shape}")
    if a.shape[1] == 1:
        av, bv = a[:, 0], b[:, 0]
        forward = _nearest_sq_dists_1d(av, np.sort(bv)).sum()
        backward = _nearest_sq_dists_1d(bv, np.sort(av)).sum()
    else:
        forward = ((a - b[_nearest_indices(a, b)]) ** 2).sum()
        backward = ((b - a[_nearest_indices(b, a)]) ** 2).sum()
    return float(forward + backward)


def chamfer_loss_grad(xhat: np.ndarray, xbar: np.ndarray) -> np.ndarray:
    """Subgradient of chamfer_loss w.r.t. xhat with nearest-neighbor pairings held fixed.

    Each xhat pixel p receives 2(p - nn(p)) from the forward sum plus
    2(p - q) for every xbar pixel q whose nearest xhat pixel is p.
    """
    a, b = _pixel_set(xhat), _pixel_set(xbar)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {xhat.shape} vs {xbar.shape}")
    grad = 2.0 * (a - b[_nearest_indices(a, b)])
    back_nn = _nearest_indices(b, a)
    np.add.at(grad, back_nn, 2.0 * (a[back_nn] - b))
    return grad.reshape(np.asarray(xhat).shape).astype(np.float64)


def chamfer_loss_torch(xhat: torch.Tensor, xbar: torch.Tensor) -> torch.Tensor:
    """Batched differentiable Chamfer loss over (B, N, C) pixel sets -> (B,).

    Squared distances are formed without square roots, so autograd through the
    min reproduces the fixed-pairing subgradient of chamfer_loss_grad.
    """
    if xhat.shape != xbar.shape or xhat.dim() != 3:
        raise ShapeError(f"expected matching (B, N, C) sets, got {tuple(xhat.shape)} vs {tuple(xbar.shape)}")
    a2 = (xhat * xhat).sum(-1, keepdim=True)          # (B, N, 1)
    b2 = (xbar * xbar).sum(-1, keepdim=True)          # (B, N, 1)
    cross = xhat @ xbar.transpose(1, 2)               # (B, N, N)
    d = (a2 + b2.transpose(1, 2) - 2.0 * cross).clamp_min(0.0)
    return d.min(dim=2).values.sum(dim=1) + d.min(dim=1).values.sum(dim=1)


def image_pixel_sets(images: torch.Tensor) -> torch.Tensor:
    """Reshape a (B, C, H, W) image batch into (B, H*W, C) pixel sets."""
    if images.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W) images, got {tuple(images.shape)}")
    b, c, h, w = images.shape
    return images.permute(0, 2, 3, 1).reshape(b, h * w, c)
