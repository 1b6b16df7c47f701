"""Finite-difference audits of the reverse-mode gradients.

Covers three layers: every primitive op, the full conditioned rendering path
(encode, gather, trunk, pool, decode, composite), and the full masked
latent-alignment loss, each on a micro configuration (1 ray, 4 coarse
points, 2 reference views) small enough for exhaustive central differences.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import renderer
from .geometry import Camera, look_at
from .pipeline import Model, ModelConfig, RayBatch

FD_STEP = 1e-5


def _op_store(shapes: dict) -> ad.ParamStore:
    ps = ad.ParamStore(7)
    for name, shape in shapes.items():
        ps.add(name, shape, init="normal", scale=0.7)
    return ps


def _shift_from_zero(ps: ad.ParamStore, eps: float = 0.15):
    # keep relu/abs kinks away from the finite-difference window
    for k, v in ps.entries.items():
        ps[k] = np.where(np.abs(v) < eps, np.sign(v + 1e-12) * eps + v, v)


def op_checks() -> dict[str, float]:
    """Per-op finite-difference errors for every primitive on the tape."""
    rng = np.random.default_rng(11)
    w = rng.normal(size=(3, 4))
    w2 = rng.normal(size=(4, 5))
    wv = rng.normal(size=4)
    checks = {}

    def case(name, shapes, fn, positive=()):
        ps = _op_store(shapes)
        _shift_from_zero(ps)
        for k in positive:
            ps[k] = np.abs(ps[k]) + 0.5
        checks[name] = ad.finite_diff_check(fn, ps, FD_STEP)

    case("add", {"a": (3, 4), "b": (3, 4)},
         lambda lv: (ad.add(lv["a"], lv["b"]) * w).sum())
    case("sub", {"a": (3, 4), "b": (3, 4)},
         lambda lv: (ad.sub(lv["a"], lv["b"]) * w).sum())
    case("mul", {"a": (3, 4), "b": (3, 4)},
         lambda lv: ad.mul(lv["a"], lv["b"]).sum())
    case("div", {"a": (3, 4), "b": (3, 4)},
         lambda lv: ad.div(lv["a"], lv["b"]).sum(), positive=("b",))
    case("pow", {"a": (3, 4)},
         lambda lv: ad.power(lv["a"], 3.0).sum())
    case("matmul", {"a": (3, 4)}, lambda lv: ad.matmul(lv["a"], w2).sum())
    case("matvec", {"a": (3, 4)}, lambda lv: ad.matvec(lv["a"], wv).sum())
    case("dot", {"a": (4,), "b": (4,)}, lambda lv: ad.dot(lv["a"], lv["b"]))
    case("exp", {"a": (3, 4)}, lambda lv: ad.exp(lv["a"]).sum())
    case("log", {"a": (3, 4)}, lambda lv: ad.log(lv["a"]).sum(), positive=("a",))
    case("relu", {"a": (3, 4)}, lambda lv: (ad.relu(lv["a"]) * w).sum())
    case("softplus", {"a": (3, 4)}, lambda lv: (ad.softplus(lv["a"]) * w).sum())
    case("sigmoid", {"a": (3, 4)}, lambda lv: (ad.sigmoid(lv["a"]) * w).sum())
    case("sum_axis", {"a": (3, 4)}, lambda lv: (lv["a"].sum(axis=1) ** 2).sum())
    case("mean_axis", {"a": (3, 4)}, lambda lv: (lv["a"].mean(axis=0) ** 2).sum())
    case("cumsum", {"a": (3, 4)},
         lambda lv: (ad.cumsum(lv["a"], axis=1) * w).sum())
    case("concat", {"a": (3, 2), "b": (3, 2)},
         lambda lv: (ad.concat([lv["a"], lv["b"]], axis=1) * w).sum())
    case("slice", {"a": (3, 4)},
         lambda lv: (lv["a"][(slice(1, 3), slice(0, 2))] ** 2).sum())
    case("gather", {"a": (5, 3)},
         lambda lv: (lv["a"][np.array([0, 2, 2, 4])] ** 2).sum())
    case("reshape", {"a": (3, 4)},
         lambda lv: (ad.reshape(lv["a"], (4, 3)) ** 2).sum())
    case("pad2d", {"a": (3, 4, 2)},
         lambda lv: (ad.pad2d(lv["a"], 1) ** 2).sum())
    case("broadcast_add", {"a": (3, 4), "b": (4,)},
         lambda lv: ((lv["a"] + lv["b"]) ** 2).sum())
    case("l2norm", {"a": (3, 4)},
         lambda lv: ad.l2norm(lv["a"], axis=1).sum())
    case("normalize", {"a": (3, 4)},
         lambda lv: (ad.normalize(lv["a"], axis=1) * w).sum())
    return checks


def micro_setup(mrvm_mode: str = "default"):
    """1 ray, 4 coarse + 2 fine points, 2 reference views, 6x6 images."""
    cfg = ModelConfig(feat_dim=4, token_dim=8, trunk_width=8, latent_dim=8,
                      proj_hidden=8, proj_dim=4, n_coarse=4, n_fine_extra=2,
                      n_views=2, mrvm_mode=mrvm_mode)
    model = Model(cfg, seed=3)
    rng = np.random.default_rng(5)
    cams = [Camera(8.0, 8.0, 3.0, 3.0, 6, 6,
                   look_at(eye, (0, 0, 0), (0, 1, 0)))
            for eye in ((0.0, 0.3, -2.0), (1.8, 0.2, -1.0))]
    imgs = [rng.random((6, 6, 3)) for _ in cams]
    d = np.array([[0.05, -0.02, 1.0]])
    d = d / np.linalg.norm(d)
    batch = RayBatch(imgs, cams, np.array([0.0, 0.0, -2.0]), d,
                     np.array([1.0]), np.array([3.0]),
                     gt=np.array([[0.4, 0.5, 0.6]]))
    return model, batch


def full_render_check() -> float:
    """Encoder -> tokens -> trunk -> pool -> decode -> composite, vs FD."""
    model, batch = micro_setup(mrvm_mode="off")
    frozen: dict = {}

    def loss_fn(leaves):
        out = model.forward(batch, np.random.default_rng(9), jitter=True,
                            mask=False, want_mrvm=False, leaves=leaves,
                            frozen=frozen)
        return out["nerf_per_ray"].mean()

    return ad.finite_diff_check(loss_fn, model.params, FD_STEP)


def full_mrvm_check() -> float:
    """The complete masked pretraining loss (rendering + alignment), vs FD."""
    model, batch = micro_setup(mrvm_mode="default")
    frozen: dict = {}

    def loss_fn(leaves):
        out = model.forward(batch, np.random.default_rng(13), jitter=True,
                            mask=True, want_mrvm=True, leaves=leaves,
                            frozen=frozen)
        return renderer.total_loss(out["nerf_per_ray"], out["mrvm_per_ray"], 0.1)

    return ad.finite_diff_check(loss_fn, model.params, FD_STEP)


def run_gradcheck(verbose: bool = False) -> float:
    worst = 0.0
    for name, err in op_checks().items():
        worst = max(worst, err)
        if verbose:
            print(f"op {name:<14s} rel err {err:.3e}")
    for name, fn in (("render path", full_render_check),
                     ("mrvm path", full_mrvm_check)):
        err = fn()
        worst = max(worst, err)
        if verbose:
            print(f"{name:<17s} rel err {err:.3e}")
    return worst
