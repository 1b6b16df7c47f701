"""Reference-view feature extraction and per-point token construction.

Each reference image goes through a tiny two-layer same-resolution conv
encoder. A 3D sample point is projected into every reference view; the
bilinearly sampled feature and RGB are merged by a linear layer into the
per-view token. Points behind a camera get the shared mask token instead
(out-of-frustum means "information missing", same as a masked entry).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .geometry import BEHIND_EPS, bilinear_sample, project_points


def add_encoder_params(store: ad.ParamStore, feat_dim: int, token_dim: int) -> None:
    store.add("encoder/conv1/w", (3, 3, 3, feat_dim))
    store.add("encoder/conv1/b", (feat_dim,), init="zeros")
    store.add("encoder/conv2/w", (3, 3, feat_dim, feat_dim))
    store.add("encoder/conv2/b", (feat_dim,), init="zeros")
    store.add("token/merge/w", (feat_dim + 3, token_dim))
    store.add("token/merge/b", (token_dim,), init="zeros")


def conv2d_same(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """3x3 same-padding convolution as nine shifted matmuls."""
    H, W, _ = x.value.shape
    padded = ad.pad2d(x, 1)
    out = None
    for dy in range(3):
        for dx in range(3):
            patch = padded[(slice(dy, dy + H), slice(dx, dx + W), slice(None))]
            flat = ad.reshape(patch, (H * W, patch.value.shape[-1]))
            term = ad.matmul(flat, w[(dy, dx)])
            out = term if out is None else out + term
    out = out + b
    return ad.reshape(out, (H, W, w.value.shape[-1]))


def encode_view(image: np.ndarray, leaves: dict[str, ad.Tensor]) -> ad.Tensor:
    """Trainable H x W x D feature map from an H x W x 3 image in [0,1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.size == 0 or image.shape[2] != 3:
        raise ValueError(f"expected non-empty H x W x 3 image, got {image.shape}")
    x = ad.Tensor(image)
    x = ad.relu(conv2d_same(x, leaves["encoder/conv1/w"], leaves["encoder/conv1/b"]))
    return conv2d_same(x, leaves["encoder/conv2/w"], leaves["encoder/conv2/b"])


def depth_frequency_encoding(t: np.ndarray, octaves: int = 4) -> np.ndarray:
    """sin/cos features of depth-along-ray, 2*octaves values per point."""
    t = np.asarray(t, dtype=np.float64).ravel()
    freqs = np.pi * (2.0 ** np.arange(octaves))
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def gather_tokens(points: np.ndarray, cameras, images, featmaps,
                  leaves: dict[str, ad.Tensor]):
    """Per-point, per-view tokens (M, S, D_h) and validity flags (M, S).

    Invalid (behind-camera) entries carry the mask token and receive zero
    gradient from image features.
    """
    points = np.asarray(points, dtype=np.float64)
    M = points.shape[0]
    mask_tok = ad.reshape(leaves["mask_token"], (1, -1))
    w = leaves["token/merge/w"]
    b = leaves["token/merge/b"]
    per_view = []
    valid = np.empty((M, len(cameras)), dtype=bool)
    for j, cam in enumerate(cameras):
        px, py, z = project_points(cam, points)
        v = z > BEHIND_EPS
        valid[:, j] = v
        f = bilinear_sample(featmaps[j], px, py)
        c = bilinear_sample(np.asarray(images[j], dtype=np.float64), px, py)
        h = ad.matmul(ad.concat([f, c], axis=1), w) + b
        vm = v[:, None].astype(np.float64)
        h = h * vm + mask_tok * (1.0 - vm)
        per_view.append(ad.reshape(h, (M, 1, h.value.shape[-1])))
    return ad.concat(per_view, axis=1), valid
