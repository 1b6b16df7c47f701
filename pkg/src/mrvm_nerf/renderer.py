"""Differentiable volume rendering and the pixel/total losses.

Transmittance is exp of a negative exclusive prefix sum of sigma * delta;
the compositing weights plus the residual transmittance always sum to one,
and the residual carries the background color.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def _check_nonneg(name, arr):
    if np.any(np.asarray(arr) < 0):
        raise ValueError(f"{name} must be non-negative")


def transmittance(sigmas, deltas):
    """Per-sample transmittance T_i and the residual T_{N+1}.

    sigmas, deltas: (R, N) arrays or Tensors; T_1 = 1 per ray.
    """
    s = sigmas if isinstance(sigmas, ad.Tensor) else ad.Tensor(np.atleast_2d(sigmas))
    d = deltas if isinstance(deltas, ad.Tensor) else ad.Tensor(np.atleast_2d(deltas))
    _check_nonneg("sigmas", s.value)
    _check_nonneg("deltas", d.value)
    tau = s * d
    csum = ad.cumsum(tau, axis=1)
    T = ad.exp(-(csum - tau))  # exclusive prefix sum
    T_res = ad.exp(-csum[(slice(None), -1)])
    return T, T_res


def composite(sigmas, colors, deltas, background):
    """Emission-absorption compositing with residual-weighted background.

    Returns (rgb (R,3), weights (R,N), residual (R,)).
    """
    s = sigmas if isinstance(sigmas, ad.Tensor) else ad.Tensor(np.atleast_2d(sigmas))
    c = colors if isinstance(colors, ad.Tensor) else ad.Tensor(colors)
    d = deltas if isinstance(deltas, ad.Tensor) else ad.Tensor(np.atleast_2d(deltas))
    bg = np.asarray(background, dtype=np.float64)
    T, T_res = transmittance(s, d)
    alpha = 1.0 - ad.exp(-(s * d))
    w = T * alpha
    R, N = w.value.shape
    rgb = (ad.reshape(w, (R, N, 1)) * c).sum(axis=1) + ad.reshape(T_res, (R, 1)) * bg
    return rgb, w, T_res


def nerf_loss(c_coarse: ad.Tensor, c_fine: ad.Tensor, c_true: np.ndarray) -> ad.Tensor:
    """Per-ray squared color error of both branches, shape (R,)."""
    gt = np.asarray(c_true, dtype=np.float64)
    dc = c_coarse - gt
    df = c_fine - gt
    return (dc * dc).sum(axis=1) + (df * df).sum(axis=1)


def total_loss(nerf_per_ray: ad.Tensor, mrvm_per_ray, lambda_eff: float) -> ad.Tensor:
    """Mean over rays of L_nerf + lambda * L_mrvm."""
    if mrvm_per_ray is None or lambda_eff == 0.0:
        return nerf_per_ray.mean()
    return (nerf_per_ray + lambda_eff * mrvm_per_ray).mean()
