"""Two-level random masking: points along a ray, then view tokens per point.

A plan selects exactly round(eta * N_f) points per ray without replacement;
each selected point masks a uniform 1..S view count and a uniform subset of
that size. Replacement swaps the token for the shared learnable mask token
and is differentiable w.r.t. that token. Only fine-branch inputs are ever
masked; the coarse branch stays clean because it steers resampling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class MaskPlan:
    """Masked structure for a single ray."""
    masked_points: np.ndarray  # sorted point indices into P^f
    masked_views: dict  # point index -> array of view indices

    def n_masked(self) -> int:
        return len(self.masked_points)


def sample_mask_plan(n_points: int, n_views: int, eta: float,
                     rng: np.random.Generator) -> MaskPlan:
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"mask ratio must be in [0,1], got {eta}")
    if n_views < 1:
        raise ValueError("need at least one view")
    k = int(round(eta * n_points))
    pts = np.sort(rng.choice(n_points, size=k, replace=False))
    views = {}
    for p in pts:
        m = int(rng.integers(1, n_views + 1))
        views[int(p)] = np.sort(rng.choice(n_views, size=m, replace=False))
    return MaskPlan(pts, views)


def plan_to_bool(plan: MaskPlan, n_points: int, n_views: int) -> np.ndarray:
    out = np.zeros((n_points, n_views), dtype=bool)
    for p, vs in plan.masked_views.items():
        out[p, vs] = True
    return out


def sample_mask_plans(n_rays: int, n_points: int, n_views: int, eta: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Independent per-ray plans, returned as a (R, N_f, S) bool array."""
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"mask ratio must be in [0,1], got {eta}")
    if n_views < 1:
        raise ValueError("need at least one view")
    out = np.zeros((n_rays, n_points, n_views), dtype=bool)
    k = int(round(eta * n_points))
    if k == 0:
        return out
    # argsort of iid uniforms = uniform draw without replacement, per row
    pts = np.argsort(rng.random((n_rays, n_points)), axis=1)[:, :k]
    counts = rng.integers(1, n_views + 1, size=(n_rays, k))
    view_rank = np.argsort(rng.random((n_rays, k, n_views)), axis=2)
    chosen = view_rank < counts[..., None]  # uniform subset of that size
    rows = np.repeat(np.arange(n_rays)[:, None], k, axis=1)
    out[rows[..., None], pts[..., None], np.arange(n_views)] = chosen
    return out


def apply_mask(tokens: ad.Tensor, mask_bool: np.ndarray,
               mask_token: ad.Tensor) -> ad.Tensor:
    """Replace planned (point, view) tokens with the mask token.

    tokens: (M, S, D_h) tensor; mask_bool: (M, S); the swap is differentiable
    w.r.t. the mask token and leaves unplanned entries bit-identical.
    """
    if mask_bool.shape != tokens.value.shape[:2]:
        raise ValueError(f"mask shape {mask_bool.shape} does not match "
                         f"token shape {tokens.value.shape[:2]}")
    if not mask_bool.any():
        return tokens
    m = mask_bool[..., None].astype(np.float64)
    tok = ad.reshape(mask_token, (1, 1, -1))
    return tokens * (1.0 - m) + tok * m
