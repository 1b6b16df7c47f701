"""Depth sampling along rays: stratified coarse pass, inverse-CDF fine pass.

The merge keeps every coarse depth value-identical and remembers where each
coarse sample landed in the merged ordering, because the latent-alignment
loss pairs coarse and fine outputs by point identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHT_FLOOR = 1e-5
DUP_EPS = 1e-9


@dataclass
class DepthSamples:
    """Sorted depths for a batch of rays, with coarse membership.

    t: (R, N) strictly increasing per row, within [t_near, t_far]
    is_coarse: (R, N) bool
    coarse_pos: (R, N_c) position of coarse sample i in the sorted row
    t_far: (R,) used for the terminal delta
    """
    t: np.ndarray
    is_coarse: np.ndarray
    coarse_pos: np.ndarray
    t_far: np.ndarray

    @property
    def deltas(self) -> np.ndarray:
        return np.concatenate([self.t[:, 1:] - self.t[:, :-1],
                               (self.t_far - self.t[:, -1])[:, None]], axis=1)


def stratified(t_near, t_far, n: int, rng: np.random.Generator | None = None,
               jitter: bool = True, n_rays: int | None = None) -> DepthSamples:
    """One sample per equal-width bin of [t_near, t_far]; midpoints if unjittered."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    R = n_rays or max(t_near.size, t_far.size)
    t_near = np.broadcast_to(t_near, (R,))
    t_far = np.broadcast_to(t_far, (R,))
    edges = np.linspace(0.0, 1.0, n + 1)
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        u = rng.random((R, n))
    else:
        u = np.full((R, n), 0.5)
    frac = edges[:-1] + u * (1.0 / n)
    t = t_near[:, None] + frac * (t_far - t_near)[:, None]
    pos = np.broadcast_to(np.arange(n), (R, n)).copy()
    return DepthSamples(t, np.ones((R, n), dtype=bool), pos, t_far.copy())


def importance(coarse: DepthSamples, weights: np.ndarray, n_extra: int,
               rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant pdf over coarse bins.

    Bins are the midpoint intervals of the coarse depths (N_c - 1 bins with
    the standard hierarchical convention); a small floor keeps every bin
    reachable. Sampling is jittered inverse-CDF, detached from gradients.
    """
    if n_extra < 1:
        raise ValueError("need at least one extra sample")
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("importance weights must be non-negative")
    t = coarse.t
    R, N = t.shape
    if weights.shape != (R, N):
        raise ValueError(f"weights shape {weights.shape} != coarse shape {(R, N)}")
    w = weights + WEIGHT_FLOOR
    # pdf over N bins: [t_i, t_{i+1}) with a terminal bin up to t_far
    edges = np.concatenate([t, coarse.t_far[:, None]], axis=1)  # (R, N+1)
    cdf = np.cumsum(w, axis=1)
    cdf = cdf / cdf[:, -1:]
    u = (np.arange(n_extra) + rng.random((R, n_extra))) / n_extra
    idx = np.empty((R, n_extra), dtype=np.intp)
    for r in range(R):
        idx[r] = np.searchsorted(cdf[r], u[r], side="right")
    idx = np.minimum(idx, N - 1)
    lo_cdf = np.where(idx > 0, np.take_along_axis(np.concatenate(
        [np.zeros((R, 1)), cdf], axis=1), idx, axis=1), 0.0)
    hi_cdf = np.take_along_axis(cdf, idx, axis=1)
    frac = (u - lo_cdf) / np.maximum(hi_cdf - lo_cdf, 1e-15)
    lo_t = np.take_along_axis(edges, idx, axis=1)
    hi_t = np.take_along_axis(edges, idx + 1, axis=1)
    return lo_t + frac * (hi_t - lo_t)


def merge(coarse: DepthSamples, extra: np.ndarray) -> DepthSamples:
    """Sorted union; coarse entries keep their flag and exact depth values."""
    if extra.size == 0:
        return DepthSamples(coarse.t.copy(), coarse.is_coarse.copy(),
                            coarse.coarse_pos.copy(), coarse.t_far.copy())
    R, Nc = coarse.t.shape
    extra = np.asarray(extra, dtype=np.float64)
    t_all = np.concatenate([coarse.t, extra], axis=1)
    flags = np.concatenate([np.ones((R, Nc), dtype=bool),
                            np.zeros((R, extra.shape[1]), dtype=bool)], axis=1)
    # nudge exact duplicates so the sorted row stays strictly increasing
    for r in range(R):
        row = t_all[r]
        srt = np.sort(row)
        if np.any(np.diff(srt) == 0.0):
            uniq, counts = np.unique(row, return_counts=True)
            for v in uniq[counts > 1]:
                hits = np.flatnonzero(row == v)
                for k, j in enumerate(hits[1:], start=1):
                    if not flags[r, j]:  # never move a coarse depth
                        row[j] = v + k * DUP_EPS
                    else:
                        others = [j2 for j2 in hits if j2 != j and not flags[r, j2]]
                        if others:
                            row[others[0]] = v + k * DUP_EPS
    order = np.argsort(t_all, axis=1, kind="stable")
    t_sorted = np.take_along_axis(t_all, order, axis=1)
    f_sorted = np.take_along_axis(flags, order, axis=1)
    coarse_pos = np.argsort(order, axis=1, kind="stable")[:, :Nc]
    return DepthSamples(t_sorted, f_sorted, coarse_pos, coarse.t_far.copy())
