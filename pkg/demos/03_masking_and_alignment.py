"""Two-level masking and the latent-alignment objective.

Shows what one training step of masked pretraining actually computes: the
point/view mask plan, the token substitution, and the alignment loss
between the fine branch's masked latents and the coarse branch's unmasked
ones, on a deliberately tiny model.

Run:  python3 demos/03_masking_and_alignment.py
"""
import numpy as np

from mrvm_nerf import autodiff as ad
from mrvm_nerf.masking import sample_mask_plans
from mrvm_nerf.geometry import Camera, look_at
from mrvm_nerf.pipeline import Model, ModelConfig, RayBatch

# --- the mask plan -------------------------------------------------------
rng = np.random.default_rng(0)
plans = sample_mask_plans(n_rays=1, n_points=12, n_views=3, eta=0.5, rng=rng)
b = plans[0]  # (points, views) boolean
print("mask plan for one ray (rows = points, columns = views):")
for i, row in enumerate(b):
    cells = "".join("X" if m else "." for m in row)
    print(f"  point {i:2d}  {cells}")
print(f"masked points: {int(b.any(axis=1).sum())} of 12 (ratio 0.5, exact)")
print("each masked point hides a uniform 1..3 of its 3 view tokens\n")

# --- one forward pass with masking on ------------------------------------
cfg = ModelConfig(feat_dim=4, token_dim=8, trunk_width=8, latent_dim=8,
                  proj_hidden=8, proj_dim=4, n_coarse=8, n_fine_extra=4,
                  n_views=2)
model = Model(cfg, seed=3)
cams = [Camera(8.0, 8.0, 3.0, 3.0, 6, 6, look_at(eye, (0, 0, 0), (0, 1, 0)))
        for eye in ((0.0, 0.3, -2.0), (1.8, 0.2, -1.0))]
imgs = [rng.random((6, 6, 3)) for _ in cams]
d = np.array([[0.05, -0.02, 1.0]])
d = d / np.linalg.norm(d)
batch = RayBatch(imgs, cams, np.array([0.0, 0.0, -2.0]), d,
                 np.array([1.0]), np.array([3.0]),
                 gt=np.array([[0.4, 0.5, 0.6]]))

out = model.forward(batch, np.random.default_rng(1), jitter=True,
                    mask=True, want_mrvm=True)
print("per-ray rendering loss (both branches):",
      np.round(out["nerf_per_ray"].value, 4))
print("per-ray alignment loss (bounded [0,4]): ",
      np.round(out["mrvm_per_ray"].value, 4))

# the alignment loss trains the fine branch and heads but, by construction,
# sends no gradient into the coarse branch (its latents are the target)
ad.backward(out["mrvm_per_ray"].mean())
leaves = out["leaves"]
coarse_grads = [n for n in leaves
                if n.startswith("coarse/") and leaves[n].grad is not None]
fine_grads = [n for n in leaves if n.startswith("fine/trunk/")
              and leaves[n].grad is not None]
print(f"\ncoarse-branch params receiving alignment gradient: {coarse_grads}")
print(f"fine-trunk params receiving alignment gradient:    {len(fine_grads)}")
