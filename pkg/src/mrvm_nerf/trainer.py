"""Pretrain/finetune loops, Adam, schedules, binary checkpoints, metrics CSV.

Randomness is counter-based: every iteration derives a fresh generator from
(seed, iteration), so runs are reproducible and resume is bit-exact without
serializing generator state beyond the iteration counter.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import mrvm, renderer
from .geometry import pixel_directions
from .metrics import psnr
from .pipeline import Model, ModelConfig, RayBatch
from .scenegen import load_manifest, ray_bbox_range

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MRVMCKP1"


@dataclass
class TrainConfig:
    total_iters: int = 2000
    batch_rays: int = 64
    lr: float = 5e-4
    lambda_base: float = 0.1
    mask_ratio: float = 0.5
    tau: float = 0.99
    mrvm_start_frac: float = 0.10
    warmup_iters: int | None = None  # defaults to 10% of total_iters
    n_views: int = 3
    seed: int = 0
    mrvm_mode: str = "default"
    bbox_sampling: bool = True
    jitter: bool = True
    checkpoint_every: int = 500
    grad_clip: float = 10.0
    max_train_views: int | None = None
    n_coarse: int = 64
    n_fine_extra: int = 32
    depth_encoding: bool = False

    def __post_init__(self):
        if not (0.0 <= self.mrvm_start_frac <= 1.0):
            raise ValueError("mrvm_start_frac must be in [0,1]")
        if self.warmup_iters is None:
            self.warmup_iters = max(1, int(round(0.10 * self.total_iters)))
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_coarse=self.n_coarse, n_fine_extra=self.n_fine_extra,
                           n_views=self.n_views, mrvm_mode=self.mrvm_mode,
                           mask_ratio=self.mask_ratio,
                           depth_encoding=self.depth_encoding)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return TrainConfig(**d)


def lambda_schedule(iteration: int, cfg: TrainConfig) -> float:
    """0 until the activation point, then linear warmup to lambda_base."""
    if not (0 <= iteration < cfg.total_iters):
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    start = int(round(cfg.mrvm_start_frac * cfg.total_iters))
    if iteration < start:
        return 0.0
    if cfg.warmup_iters > 0 and iteration < start + cfg.warmup_iters:
        return cfg.lambda_base * (iteration - start) / cfg.warmup_iters
    return cfg.lambda_base


class Adam:
    """Adaptive-moment optimizer with global-norm gradient clipping."""

    def __init__(self, params: ad.ParamStore, names: list[str], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float = 10.0):
        self.params = params
        self.names = list(names)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}

    def step(self, grads: dict) -> bool:
        """One update; returns True when the clip triggered."""
        gnorm = np.sqrt(sum(float((grads[n] ** 2).sum()) for n in self.names))
        clipped = bool(self.clip_norm > 0 and gnorm > self.clip_norm)
        scale = self.clip_norm / gnorm if clipped else 1.0
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for n in self.names:
            g = grads[n] * scale
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            self.params[n] = self.params[n] - self.lr * (self.m[n] / bc1) / (
                np.sqrt(self.v[n] / bc2) + self.eps)
        return clipped


# ---------------------------------------------------------------------------
# data plumbing

class SceneData:
    """A dataset directory: manifest, preloaded images, bbox, splits."""

    def __init__(self, path):
        self.manifest = load_manifest(path)
        self.images = [self.manifest.load_image(i)
                       for i in range(len(self.manifest.image_files))]

    @property
    def cameras(self):
        return self.manifest.cameras

    def train_views(self, limit=None):
        idx = list(self.manifest.splits["train"])
        return idx[:limit] if limit else idx

    def test_views(self):
        return list(self.manifest.splits["test"])


def iter_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, iteration)))


def make_batch(scene: SceneData, cfg: TrainConfig, rng: np.random.Generator) -> RayBatch:
    """Reference views + target-view rays for one training iteration."""
    train = scene.train_views(cfg.max_train_views)
    if len(train) < cfg.n_views + 1:
        raise ValueError("not enough training views for reference + target split")
    pick = rng.choice(len(train), size=cfg.n_views + 1, replace=False)
    refs = [train[i] for i in pick[:-1]]
    tgt = train[pick[-1]]
    cam = scene.cameras[tgt]
    m = scene.manifest
    if cfg.bbox_sampling:
        from .scenegen import bbox_ray_filter
        px, py = bbox_ray_filter(m, cam, rng, cfg.batch_rays)
    else:
        px = rng.integers(0, cam.width, size=cfg.batch_rays)
        py = rng.integers(0, cam.height, size=cfg.batch_rays)
    dirs = pixel_directions(cam, px, py)
    t_near, t_far, _ = ray_bbox_range(m.bbox_min, m.bbox_max,
                                      cam.center[None, :], dirs)
    gt = scene.images[tgt][py, px]
    return RayBatch([scene.images[i] for i in refs],
                    [scene.cameras[i] for i in refs],
                    cam.center.copy(), dirs, t_near, t_far, gt)


# ---------------------------------------------------------------------------
# training steps

def pretrain_step(model: Model, opt: Adam, batch: RayBatch,
                  rng: np.random.Generator, lambda_eff: float,
                  cfg: TrainConfig) -> dict:
    """Joint rendering + latent-alignment step, then the EMA target update."""
    use_mrvm = model.cfg.mrvm_mode != "off"
    out = model.forward(batch, rng, jitter=cfg.jitter, mask=use_mrvm,
                        want_mrvm=use_mrvm)
    nerf_pr = out["nerf_per_ray"]
    if out["mrvm_scalar"] is not None:  # featmask1: a single masked-entry term
        total = nerf_pr.mean() + lambda_eff * out["mrvm_scalar"]
        mrvm_val = float(out["mrvm_scalar"].value)
    else:
        total = renderer.total_loss(nerf_pr, out["mrvm_per_ray"], lambda_eff)
        mrvm_val = (float(out["mrvm_per_ray"].value.mean())
                    if out["mrvm_per_ray"] is not None else 0.0)
    metrics = _loss_metrics(out, batch, mrvm_val, lambda_eff)
    if not np.isfinite(total.value):
        log.warning("non-finite loss, step aborted (state unchanged)")
        metrics["aborted"] = 1
        return metrics
    ad.backward(total)
    grads = {n: g for n, g in ad.collect_grads(out["leaves"]).items()}
    metrics["clipped"] = int(opt.step({n: grads[n] for n in opt.names}))
    if model.cfg.mrvm_mode in ("default", "featmask2"):
        mrvm.ema_update(model.target, model.params, cfg.tau)
    metrics["aborted"] = 0
    return metrics


def finetune_step(model: Model, opt: Adam, batch: RayBatch,
                  rng: np.random.Generator, cfg: TrainConfig) -> dict:
    """Rendering loss only: no masking, no heads in the graph."""
    out = model.forward(batch, rng, jitter=cfg.jitter, mask=False, want_mrvm=False)
    nerf_pr = out["nerf_per_ray"]
    total = nerf_pr.mean()
    metrics = _loss_metrics(out, batch, 0.0, 0.0)
    if not np.isfinite(total.value):
        log.warning("non-finite loss, step aborted (state unchanged)")
        metrics["aborted"] = 1
        return metrics
    ad.backward(total)
    grads = ad.collect_grads(out["leaves"])
    metrics["clipped"] = int(opt.step({n: grads[n] for n in opt.names}))
    metrics["aborted"] = 0
    return metrics


def _loss_metrics(out, batch, mrvm_val, lambda_eff):
    cc = out["c_coarse"].value
    cf = out["c_fine"].value
    gt = batch.gt
    return {
        "L_nerf_c": float(((gt - cc) ** 2).sum(axis=1).mean()),
        "L_nerf_f": float(((gt - cf) ** 2).sum(axis=1).mean()),
        "L_mrvm": mrvm_val,
        "lambda_eff": lambda_eff,
        "psnr_train_sample": psnr(np.clip(cf, 0, 1), gt),
    }


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: Model, opt: Adam, iteration: int,
                    cfg: TrainConfig) -> None:
    arrays = []
    index = []
    offset = 0

    def register(store_name, name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        index.append({"store": store_name, "name": name, "shape": list(arr.shape),
                      "dtype": "<f8", "offset": offset})
        arrays.append(arr)
        offset += arr.nbytes

    for n, a in model.params.entries.items():
        register("params", n, a)
    for n, a in model.target.entries.items():
        register("target", n, a)
    for n in opt.names:
        register("adam_m", n, opt.m[n])
        register("adam_v", n, opt.v[n])
    header = {
        "version": 1,
        "iteration": iteration,
        "adam_t": opt.t,
        "opt_names": opt.names,
        "config": cfg.to_json(),
        "index": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(np.uint64(len(blob)).tobytes())
        f.write(blob)
        for a in arrays:
            f.write(a.tobytes())


def load_checkpoint(path):
    """Returns (model, adam, iteration, train config); refuses corrupt files."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    hlen = int(np.frombuffer(data[8:16], dtype=np.uint64)[0])
    try:
        header = json.loads(data[16:16 + hlen])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: corrupt checkpoint header: {e}") from None
    cfg = TrainConfig.from_json(header["config"])
    model = Model(cfg.model_config(), cfg.seed)
    body = data[16 + hlen:]
    stores = {"params": model.params.entries, "target": model.target.entries,
              "adam_m": {}, "adam_v": {}}
    for ent in header["index"]:
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = np.frombuffer(body, dtype=ent["dtype"], count=n,
                            offset=ent["offset"]).reshape(ent["shape"]).copy()
        stores[ent["store"]][ent["name"]] = arr
    opt = Adam(model.params, header["opt_names"], cfg.lr, clip_norm=cfg.grad_clip)
    opt.t = header["adam_t"]
    opt.m = {n: stores["adam_m"][n] for n in opt.names}
    opt.v = {n: stores["adam_v"][n] for n in opt.names}
    return model, opt, header["iteration"], cfg


# ---------------------------------------------------------------------------
# full runs

METRIC_COLUMNS = ["iter", "L_nerf_c", "L_nerf_f", "L_mrvm", "lambda_eff",
                  "psnr_train_sample", "wallclock_s"]


def run(cfg: TrainConfig, dataset_dirs: list, mode: str, workdir,
        resume_from=None) -> dict:
    """Train to completion; emits metrics.csv and periodic checkpoints."""
    if mode not in ("pretrain", "finetune"):
        raise ValueError(f"mode must be pretrain or finetune, got {mode}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    scenes = [SceneData(d) for d in dataset_dirs]

    start_iter = 0
    if resume_from is not None:
        model, opt, start_iter, _ = load_checkpoint(resume_from)
        if mode == "finetune" and any(n.startswith("heads/") for n in opt.names):
            # a pretrain checkpoint: drop head parameters from the update set
            opt = Adam(model.params, model.trainable_names("finetune"),
                       cfg.lr, clip_norm=cfg.grad_clip)
            start_iter = 0
    else:
        model = Model(cfg.model_config(), cfg.seed)
        phase = "finetune" if mode == "finetune" else "pretrain"
        opt = Adam(model.params, model.trainable_names(phase), cfg.lr,
                   clip_norm=cfg.grad_clip)

    metrics_path = workdir / "metrics.csv"
    write_header = start_iter == 0 or not metrics_path.exists()
    t0 = time.perf_counter()
    with open(metrics_path, "w" if write_header else "a") as mf:
        if write_header:
            mf.write(",".join(METRIC_COLUMNS) + "\n")
        for it in range(start_iter, cfg.total_iters):
            rng = iter_rng(cfg.seed, it)
            scene = scenes[int(rng.integers(len(scenes)))]
            batch = make_batch(scene, cfg, rng)
            if mode == "pretrain":
                lam = lambda_schedule(it, cfg)
                m = pretrain_step(model, opt, batch, rng, lam, cfg)
            else:
                m = finetune_step(model, opt, batch, rng, cfg)
            wall = time.perf_counter() - t0
            mf.write(f"{it},{m['L_nerf_c']:.17g},{m['L_nerf_f']:.17g},"
                     f"{m['L_mrvm']:.17g},{m['lambda_eff']:.17g},"
                     f"{m['psnr_train_sample']:.17g},{wall:.3f}\n")
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(workdir / f"checkpoint_{it + 1:06d}.bin",
                                model, opt, it + 1, cfg)
    final = workdir / "checkpoint_final.bin"
    save_checkpoint(final, model, opt, cfg.total_iters, cfg)
    return {"model": model, "optimizer": opt, "checkpoint": final,
            "metrics": metrics_path}


def reference_views(scene: SceneData, n_views: int) -> list:
    """n_views train views spread evenly across the available viewpoints."""
    train = scene.train_views()
    step = max(1, len(train) // n_views)
    return train[::step][:n_views]


def evaluate(model: Model, scene: SceneData, n_views: int,
             split: str = "test") -> dict:
    """Render held-out views with the fine branch and score them."""
    from .metrics import eval_report
    refs = reference_views(scene, n_views)
    ref_imgs = [scene.images[i] for i in refs]
    ref_cams = [scene.cameras[i] for i in refs]
    views = scene.test_views() if split == "test" else scene.train_views()
    renders, truths = [], []
    m = scene.manifest
    for v in views:
        cam = scene.cameras[v]
        ys, xs = np.mgrid[0:cam.height, 0:cam.width]
        dirs = pixel_directions(cam, xs.ravel(), ys.ravel())
        t_near, t_far, _ = ray_bbox_range(m.bbox_min, m.bbox_max,
                                          cam.center[None, :], dirs)
        renders.append(model.render_view(ref_imgs, ref_cams, cam, t_near, t_far))
        truths.append(scene.images[v])
    return eval_report(renders, truths, views, m.scene_id)
