"""Latent-alignment pretraining heads: online projector+predictor, EMA target.

The masked fine branch is the online side: its latents at coarse-shared
points go through projector and predictor. The unmasked coarse branch is the
target side: its latents are detached and pushed through a projector that is
never gradient-trained, only updated as an exponential moving average of the
online projector. The loss is the squared distance between unit-normalized
outputs, equivalently 2 - 2 cos.

Two ablation variants are supported: a direct token-reconstruction decoder
(featmask1) and an EMA copy of the whole fine trunk as target (featmask2).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

MODES = ("default", "featmask1", "featmask2", "off")
NORM_EPS = 1e-12


def add_head_params(store: ad.ParamStore, latent_dim: int, proj_hidden: int,
                    proj_dim: int, mode: str = "default",
                    token_dim: int | None = None) -> None:
    store.add("heads/proj_online/l0/w", (latent_dim, proj_hidden))
    store.add("heads/proj_online/l0/b", (proj_hidden,), init="zeros")
    store.add("heads/proj_online/l1/w", (proj_hidden, proj_dim))
    store.add("heads/proj_online/l1/b", (proj_dim,), init="zeros")
    store.add("heads/pred_online/l0/w", (proj_dim, proj_dim))
    store.add("heads/pred_online/l0/b", (proj_dim,), init="zeros")
    store.add("heads/pred_online/l1/w", (proj_dim, proj_dim))
    store.add("heads/pred_online/l1/b", (proj_dim,), init="zeros")
    if mode == "featmask1":
        store.add("heads/featdec/l0/w", (latent_dim, proj_hidden))
        store.add("heads/featdec/l0/b", (proj_hidden,), init="zeros")
        store.add("heads/featdec/l1/w", (proj_hidden, token_dim))
        store.add("heads/featdec/l1/b", (token_dim,), init="zeros")


def head_param_names(store: ad.ParamStore) -> list[str]:
    return [n for n in store.names() if n.startswith("heads/")]


def init_target_store(online: ad.ParamStore, mode: str = "default",
                      fine_trunk_names: list[str] | None = None) -> ad.ParamStore:
    """Target parameters start as a copy of their online counterparts."""
    target = ad.ParamStore(online.rng_seed)
    for name in ("heads/proj_online/l0/w", "heads/proj_online/l0/b",
                 "heads/proj_online/l1/w", "heads/proj_online/l1/b"):
        tname = name.replace("proj_online", "proj_target")
        target[tname] = online[name].copy()
    if mode == "featmask2":
        for name in fine_trunk_names or []:
            target[f"target/{name}"] = online[name].copy()
    return target


def ema_update(target: ad.ParamStore, online: ad.ParamStore, tau: float) -> None:
    """Theta <- tau * Theta + (1 - tau) * theta, elementwise, in place."""
    for tname in target.names():
        if tname.startswith("heads/proj_target/"):
            oname = tname.replace("proj_target", "proj_online")
        elif tname.startswith("target/"):
            oname = tname[len("target/"):]
        else:
            continue
        th, on = target[tname], online[oname]
        if th.shape != on.shape:
            raise ValueError(f"EMA shape mismatch for {tname}: {th.shape} vs {on.shape}")
        target[tname] = tau * th + (1.0 - tau) * on


def online_project_predict(z_f: ad.Tensor, leaves: dict[str, ad.Tensor]) -> ad.Tensor:
    """Predictor(projector(z)) on fine-branch latents; fully differentiable."""
    x = ad.relu(ad.matmul(z_f, leaves["heads/proj_online/l0/w"])
                + leaves["heads/proj_online/l0/b"])
    x = ad.matmul(x, leaves["heads/proj_online/l1/w"]) + leaves["heads/proj_online/l1/b"]
    x = ad.relu(ad.matmul(x, leaves["heads/pred_online/l0/w"])
                + leaves["heads/pred_online/l0/b"])
    return ad.matmul(x, leaves["heads/pred_online/l1/w"]) + leaves["heads/pred_online/l1/b"]


def target_project(z_c: np.ndarray, target: ad.ParamStore) -> np.ndarray:
    """Target projection in plain numpy: gradients stop at the input."""
    x = np.maximum(z_c @ target["heads/proj_target/l0/w"]
                   + target["heads/proj_target/l0/b"], 0.0)
    return x @ target["heads/proj_target/l1/w"] + target["heads/proj_target/l1/b"]


def _unit_rows(x: np.ndarray):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    bad = n <= NORM_EPS
    return np.where(bad, 0.0, x / np.where(bad, 1.0, n)), bad[..., 0]


def mrvm_loss(online: ad.Tensor, target: np.ndarray):
    """Mean over pairs of ||unit(online) - unit(target)||^2.

    Pairs where either vector has near-zero norm contribute 0; the count of
    such degenerate pairs is returned alongside the per-pair loss tensor
    (shape (P,)) for telemetry.
    """
    tgt_unit, tgt_bad = _unit_rows(np.asarray(target, dtype=np.float64))
    on_bad = np.linalg.norm(online.value, axis=-1) <= NORM_EPS
    ok = (~tgt_bad & ~on_bad)[:, None].astype(np.float64)
    on_unit = ad.normalize(online, axis=-1)
    diff = (on_unit - tgt_unit) * ok
    per_pair = (diff * diff).sum(axis=1)
    return per_pair, int((~ok[:, 0].astype(bool)).sum())


def mrvm_loss_cosine(online: np.ndarray, target: np.ndarray) -> np.ndarray:
    """The 2 - 2 cos form of the same per-pair loss (numpy, for verification)."""
    on_unit, on_bad = _unit_rows(np.asarray(online, dtype=np.float64))
    tgt_unit, tgt_bad = _unit_rows(np.asarray(target, dtype=np.float64))
    loss = 2.0 - 2.0 * (on_unit * tgt_unit).sum(axis=-1)
    return np.where(on_bad | tgt_bad, 0.0, loss)


def featmask1_loss(z_per_view: ad.Tensor, h_original: np.ndarray,
                   mask_bool: np.ndarray, leaves: dict[str, ad.Tensor]) -> ad.Tensor:
    """Reconstruct masked tokens from per-view latents; unit-normalized L2.

    z_per_view: (M, S, D_z) fine per-view latents; h_original: (M, S, D_h)
    pre-mask token values (detached targets); only masked entries count.
    """
    if not mask_bool.any():
        return ad.Tensor(0.0)
    M, S, Dz = z_per_view.value.shape
    idx = np.nonzero(mask_bool)
    z_sel = z_per_view[idx]
    x = ad.relu(ad.matmul(z_sel, leaves["heads/featdec/l0/w"]) + leaves["heads/featdec/l0/b"])
    h_hat = ad.matmul(x, leaves["heads/featdec/l1/w"]) + leaves["heads/featdec/l1/b"]
    tgt_unit, tgt_bad = _unit_rows(h_original[idx])
    ok = (~tgt_bad)[:, None].astype(np.float64)
    diff = (ad.normalize(h_hat, axis=-1) - tgt_unit) * ok
    return (diff * diff).sum(axis=1).mean()
