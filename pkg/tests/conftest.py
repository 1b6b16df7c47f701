"""Shared fixtures: tiny procedural datasets and micro model setups."""
from __future__ import annotations

import numpy as np
import pytest

from mrvm_nerf import scenegen, trainer
from mrvm_nerf.geometry import Camera, look_at
from mrvm_nerf.pipeline import Model, ModelConfig, RayBatch


def make_dataset(path, seed=1, n_views=8, width=24, height=24, n_test=2,
                 scene_id="scene"):
    """Emit one procedural scene dataset and return its directory."""
    rng = np.random.default_rng(seed)
    spec = scenegen.sample_scene(rng, scenegen.GenConfig(), scene_id=scene_id)
    cams = scenegen.orbit_cameras(n_views, width, height)
    scenegen.emit_dataset(spec, cams, path, n_test=n_test)
    return path


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """One 8-view 24x24 scene, shared read-only across tests."""
    return make_dataset(tmp_path_factory.mktemp("data") / "scene0")


@pytest.fixture(scope="session")
def tiny_scene_data(tiny_dataset):
    return trainer.SceneData(tiny_dataset)


def micro_model(mrvm_mode="default", seed=3):
    """1-ray-scale model: tiny dims, 2 reference views of 6x6 images."""
    cfg = ModelConfig(feat_dim=4, token_dim=8, trunk_width=8, latent_dim=8,
                      proj_hidden=8, proj_dim=4, n_coarse=4, n_fine_extra=2,
                      n_views=2, mrvm_mode=mrvm_mode)
    model = Model(cfg, seed=seed)
    rng = np.random.default_rng(5)
    cams = [Camera(8.0, 8.0, 3.0, 3.0, 6, 6, look_at(eye, (0, 0, 0), (0, 1, 0)))
            for eye in ((0.0, 0.3, -2.0), (1.8, 0.2, -1.0))]
    imgs = [rng.random((6, 6, 3)) for _ in cams]
    d = np.array([[0.05, -0.02, 1.0]])
    d = d / np.linalg.norm(d)
    batch = RayBatch(imgs, cams, np.array([0.0, 0.0, -2.0]), d,
                     np.array([1.0]), np.array([3.0]),
                     gt=np.array([[0.4, 0.5, 0.6]]))
    return model, batch
