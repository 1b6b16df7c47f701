"""End-to-end model: parameters, two-branch forward pass, image rendering.

One `Model` owns every trainable array (encoder, mask token, coarse and fine
branches, projector/predictor heads) plus the EMA-target store. The forward
pass runs the coarse branch on stratified samples, importance-resamples,
runs the (optionally masked) fine branch on the merged set, and returns the
per-ray loss pieces.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import field, masking, mrvm, renderer, sampler
from .encoder import (add_encoder_params, depth_frequency_encoding, encode_view,
                      gather_tokens)


@dataclass
class ModelConfig:
    feat_dim: int = 16
    token_dim: int = 32
    trunk_width: int = 64
    latent_dim: int = 32
    proj_hidden: int = 32
    proj_dim: int = 16
    n_coarse: int = 64
    n_fine_extra: int = 32
    n_views: int = 3
    depth_encoding: bool = False
    mrvm_mode: str = "default"
    mask_ratio: float = 0.5
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.mrvm_mode not in mrvm.MODES:
            raise ValueError(f"mrvm_mode must be one of {mrvm.MODES}")

    @property
    def trunk_in_dim(self) -> int:
        return self.token_dim + (8 if self.depth_encoding else 0)


@dataclass
class RayBatch:
    """Rays from one target view of one scene plus its reference views."""
    ref_images: list
    ref_cameras: list
    origin: np.ndarray  # (3,) target camera center
    dirs: np.ndarray  # (R, 3) unit
    t_near: np.ndarray  # (R,)
    t_far: np.ndarray  # (R,)
    gt: np.ndarray | None = None  # (R, 3)


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ad.ParamStore(seed)
        add_encoder_params(self.params, cfg.feat_dim, cfg.token_dim)
        self.params.add("mask_token", (cfg.token_dim,), init="normal", scale=0.02)
        field.add_branch_params(self.params, "coarse", cfg.trunk_in_dim,
                                cfg.trunk_width, cfg.latent_dim)
        field.add_branch_params(self.params, "fine", cfg.trunk_in_dim,
                                cfg.trunk_width, cfg.latent_dim)
        if cfg.mrvm_mode != "off":
            mrvm.add_head_params(self.params, cfg.latent_dim, cfg.proj_hidden,
                                 cfg.proj_dim, cfg.mrvm_mode, cfg.token_dim)
        if cfg.mrvm_mode in ("default", "featmask2"):
            self.target = mrvm.init_target_store(
                self.params, cfg.mrvm_mode, field.branch_param_names("fine"))
        else:
            self.target = ad.ParamStore(seed)

    def trainable_names(self, phase: str) -> list[str]:
        names = self.params.names()
        if phase == "finetune":
            names = [n for n in names if not n.startswith("heads/")]
        return names

    # ------------------------------------------------------------------
    def forward(self, batch: RayBatch, rng: np.random.Generator, *,
                jitter: bool = True, mask: bool = False,
                want_mrvm: bool = False, leaves: dict | None = None,
                frozen: dict | None = None) -> dict:
        """Run both branches over a ray batch; returns loss pieces and renders."""
        cfg = self.cfg
        R = batch.dirs.shape[0]
        S = len(batch.ref_cameras)
        leaves = leaves if leaves is not None else self.params.tensors()
        featmaps = [encode_view(img, leaves) for img in batch.ref_images]
        bg = np.asarray(cfg.background, dtype=np.float64)

        # coarse stage
        coarse = sampler.stratified(batch.t_near, batch.t_far, cfg.n_coarse,
                                    rng, jitter=jitter, n_rays=R)
        sig_c, col_c, z_c, _ = self._branch(
            "coarse", coarse.t, batch, featmaps, leaves, mask_bool=None)
        c_coarse, w_c, res_c = renderer.composite(
            sig_c, col_c, ad.Tensor(coarse.deltas), bg)

        # fine stage: resampling weights are detached from the graph
        extra = sampler.importance(coarse, w_c.value, cfg.n_fine_extra, rng)
        if frozen is not None:
            # gradient audits freeze the resampled depths so finite
            # differences see the same sample set as the tape
            extra = frozen.setdefault("extra", extra)
        fine = sampler.merge(coarse, extra)
        n_fine = fine.t.shape[1]
        mask_bool = None
        if mask and cfg.mask_ratio > 0.0:
            plans = masking.sample_mask_plans(R, n_fine, S, cfg.mask_ratio, rng)
            mask_bool = plans.reshape(R * n_fine, S)
        sig_f, col_f, z_f, fine_extras = self._branch(
            "fine", fine.t, batch, featmaps, leaves, mask_bool=mask_bool,
            keep_per_view=(want_mrvm and cfg.mrvm_mode == "featmask1"),
            keep_unmasked=(want_mrvm and cfg.mrvm_mode == "featmask2"))
        c_fine, w_f, res_f = renderer.composite(
            sig_f, col_f, ad.Tensor(fine.deltas), bg)

        out = {
            "c_coarse": c_coarse, "c_fine": c_fine,
            "w_coarse": w_c, "w_fine": w_f,
            "res_coarse": res_c, "res_fine": res_f,
            "leaves": leaves, "mask_bool": mask_bool,
            "mrvm_per_ray": None, "mrvm_scalar": None, "degenerate_pairs": 0,
        }
        if batch.gt is not None:
            out["nerf_per_ray"] = renderer.nerf_loss(c_coarse, c_fine, batch.gt)

        if want_mrvm and cfg.mrvm_mode != "off":
            self._mrvm_terms(out, cfg, R, n_fine, fine, z_c, z_f,
                             fine_extras, leaves, frozen)
        return out

    def _branch(self, branch: str, t: np.ndarray, batch: RayBatch, featmaps,
                leaves, mask_bool=None, keep_per_view: bool = False,
                keep_unmasked: bool = False):
        cfg = self.cfg
        R, N = t.shape
        pts = (batch.origin[None, None, :] + t[..., None] * batch.dirs[:, None, :])
        tokens, _ = gather_tokens(pts.reshape(-1, 3), batch.ref_cameras,
                                  batch.ref_images, featmaps, leaves)
        extras = {}
        if keep_per_view or keep_unmasked:
            extras["h_original"] = tokens.value.copy()
        if mask_bool is not None:
            tokens = masking.apply_mask(tokens, mask_bool, leaves["mask_token"])
        if cfg.depth_encoding:
            pe = depth_frequency_encoding(t.reshape(-1))
            pe3 = np.broadcast_to(pe[:, None, :],
                                  (R * N, len(batch.ref_cameras), pe.shape[1])).copy()
            tokens = ad.concat([tokens, ad.Tensor(pe3)], axis=2)
            if keep_unmasked:
                extras["unmasked_np"] = np.concatenate(
                    [extras["h_original"], pe3], axis=2)
        elif keep_unmasked:
            extras["unmasked_np"] = extras["h_original"]
        per_view = field.trunk_forward(tokens, leaves, branch)
        if keep_per_view:
            extras["per_view"] = per_view
        z = field.pool_views(per_view)
        sigma, color = field.decode(z, leaves, branch)
        sig = ad.reshape(sigma, (R, N))
        col = ad.reshape(color, (R, N, 3))
        return sig, col, z, extras

    def _mrvm_terms(self, out, cfg, R, n_fine, fine, z_c, z_f, fine_extras,
                    leaves, frozen=None):
        if cfg.mrvm_mode == "featmask1":
            if out["mask_bool"] is None:
                out["mrvm_scalar"] = ad.Tensor(0.0)
                return
            target_h = fine_extras["h_original"]
            if frozen is not None:  # detached target: constant for FD audits
                target_h = frozen.setdefault("featmask1_target", target_h)
            out["mrvm_scalar"] = mrvm.featmask1_loss(
                fine_extras["per_view"], target_h, out["mask_bool"], leaves)
            return
        flat_idx = (np.arange(R)[:, None] * n_fine + fine.coarse_pos).ravel()
        z_shared = z_f[flat_idx]
        zbar_f = mrvm.online_project_predict(z_shared, leaves)
        if cfg.mrvm_mode == "default":
            tgt_latent = z_c.value  # stop-gradient at the coarse latents
        else:  # featmask2: EMA copy of the fine trunk, fed unmasked tokens
            store = {k[len("target/"):]: v for k, v in self.target.entries.items()
                     if k.startswith("target/")}
            pv = field.np_trunk_forward(fine_extras["unmasked_np"], store, "fine")
            tgt_latent = pv.mean(axis=1)[flat_idx]
        zbar_c = mrvm.target_project(tgt_latent, self.target)
        if frozen is not None:  # stop-gradded target is a constant for FD audits
            zbar_c = frozen.setdefault("zbar_c", zbar_c)
        per_pair, degen = mrvm.mrvm_loss(zbar_f, zbar_c)
        out["degenerate_pairs"] = degen
        n_c = fine.coarse_pos.shape[1]
        out["mrvm_per_ray"] = ad.reshape(per_pair, (R, n_c)).mean(axis=1)

    # ------------------------------------------------------------------
    def render_view(self, ref_images, ref_cameras, camera, t_near, t_far,
                    chunk: int = 512) -> np.ndarray:
        """Full-image fine-branch render (no jitter, no masking, no grads)."""
        from .geometry import pixel_directions
        ys, xs = np.mgrid[0:camera.height, 0:camera.width]
        dirs = pixel_directions(camera, xs.ravel(), ys.ravel())
        t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (dirs.shape[0],))
        t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (dirs.shape[0],))
        rng = np.random.default_rng(0)  # unused when jitter is off
        rows = []
        with ad.no_grad():
            leaves = self.params.tensors()
            for lo in range(0, dirs.shape[0], chunk):
                hi = min(lo + chunk, dirs.shape[0])
                batch = RayBatch(ref_images, ref_cameras, camera.center,
                                 dirs[lo:hi], t_near[lo:hi], t_far[lo:hi])
                out = self.forward(batch, rng, jitter=False, mask=False,
                                   want_mrvm=False, leaves=leaves)
                rows.append(out["c_fine"].value)
        img = np.concatenate(rows, axis=0).reshape(camera.height, camera.width, 3)
        return np.clip(img, 0.0, 1.0)
