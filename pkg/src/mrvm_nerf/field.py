"""The conditioned radiance field: per-view trunk, view pooling, decoding.

Coarse and fine branches share an architecture but never parameters. The
trunk maps each per-view token independently; pooling is a plain mean over
views in view-index order, which keeps it permutation-invariant and fully
differentiable. Density comes out through softplus, color through sigmoid.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def add_branch_params(store: ad.ParamStore, branch: str, in_dim: int,
                      width: int, latent_dim: int) -> None:
    store.add(f"{branch}/trunk/l0/w", (in_dim, width))
    store.add(f"{branch}/trunk/l0/b", (width,), init="zeros")
    store.add(f"{branch}/trunk/l1/w", (width, width))
    store.add(f"{branch}/trunk/l1/b", (width,), init="zeros")
    store.add(f"{branch}/trunk/l2/w", (width, latent_dim))
    store.add(f"{branch}/trunk/l2/b", (latent_dim,), init="zeros")
    store.add(f"{branch}/head/l0/w", (latent_dim, width))
    store.add(f"{branch}/head/l0/b", (width,), init="zeros")
    store.add(f"{branch}/head/l1/w", (width, 4))
    store.add(f"{branch}/head/l1/b", (4,), init="zeros")


def branch_param_names(branch: str) -> list[str]:
    return [f"{branch}/trunk/l{i}/{p}" for i in range(3) for p in ("w", "b")] + \
           [f"{branch}/head/l{i}/{p}" for i in range(2) for p in ("w", "b")]


def trunk_forward(tokens: ad.Tensor, leaves: dict[str, ad.Tensor],
                  branch: str) -> ad.Tensor:
    """Map tokens (M, S, D_in) to per-view latents (M, S, D_z), shared weights."""
    M, S, D = tokens.value.shape
    if S < 1:
        raise ValueError("need at least one reference view")
    x = ad.reshape(tokens, (M * S, D))
    x = ad.relu(ad.matmul(x, leaves[f"{branch}/trunk/l0/w"]) + leaves[f"{branch}/trunk/l0/b"])
    x = ad.relu(ad.matmul(x, leaves[f"{branch}/trunk/l1/w"]) + leaves[f"{branch}/trunk/l1/b"])
    x = ad.matmul(x, leaves[f"{branch}/trunk/l2/w"]) + leaves[f"{branch}/trunk/l2/b"]
    return ad.reshape(x, (M, S, x.value.shape[-1]))


def pool_views(per_view: ad.Tensor) -> ad.Tensor:
    """Mean over the view axis (M, S, D_z) -> (M, D_z); fixed summation order."""
    return per_view.mean(axis=1)


def decode(z: ad.Tensor, leaves: dict[str, ad.Tensor], branch: str):
    """Latents (M, D_z) -> (sigma (M,), color (M, 3))."""
    x = ad.relu(ad.matmul(z, leaves[f"{branch}/head/l0/w"]) + leaves[f"{branch}/head/l0/b"])
    x = ad.matmul(x, leaves[f"{branch}/head/l1/w"]) + leaves[f"{branch}/head/l1/b"]
    sigma = ad.softplus(x[(slice(None), 0)])
    color = ad.sigmoid(x[(slice(None), slice(1, 4))])
    return sigma, color


# numpy-only twin used by the EMA target side (no gradients ever flow there)

def np_trunk_forward(tokens: np.ndarray, store, branch: str) -> np.ndarray:
    M, S, D = tokens.shape
    x = tokens.reshape(M * S, D)
    x = np.maximum(x @ store[f"{branch}/trunk/l0/w"] + store[f"{branch}/trunk/l0/b"], 0.0)
    x = np.maximum(x @ store[f"{branch}/trunk/l1/w"] + store[f"{branch}/trunk/l1/b"], 0.0)
    x = x @ store[f"{branch}/trunk/l2/w"] + store[f"{branch}/trunk/l2/b"]
    return x.reshape(M, S, -1)
