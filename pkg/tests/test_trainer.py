"""Training loops, optimizer, schedules, checkpoints, determinism."""
import numpy as np
import pytest

from mrvm_nerf import trainer
from mrvm_nerf.trainer import (Adam, SceneData, TrainConfig, iter_rng,
                               lambda_schedule, load_checkpoint, make_batch,
                               save_checkpoint)


def fast_cfg(**kw):
    base = dict(total_iters=4, batch_rays=4, n_views=3, n_coarse=4,
                n_fine_extra=2, checkpoint_every=2, seed=11)
    base.update(kw)
    return TrainConfig(**base)


def read_metrics(path):
    lines = path.read_text().strip().split("\n")
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


class TestTrainConfig:
    def test_warmup_defaults_to_ten_percent(self):
        assert TrainConfig(total_iters=2000).warmup_iters == 200
        assert TrainConfig(total_iters=5).warmup_iters == 1

    def test_bad_start_frac_rejected(self):
        with pytest.raises(ValueError, match="mrvm_start_frac"):
            TrainConfig(mrvm_start_frac=1.5)

    def test_json_roundtrip(self):
        cfg = TrainConfig(total_iters=100, lr=1e-3, mrvm_mode="featmask1")
        assert TrainConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown config"):
            TrainConfig.from_json({"total_iters": 10, "bogus": 1})


class TestLambdaSchedule:
    def test_zero_before_activation(self):
        cfg = TrainConfig(total_iters=1000, lambda_base=0.1)
        assert all(lambda_schedule(i, cfg) == 0.0 for i in (0, 50, 99))

    def test_linear_warmup_then_plateau(self):
        cfg = TrainConfig(total_iters=1000, lambda_base=0.1)  # start 100, warmup 100
        assert lambda_schedule(100, cfg) == 0.0
        assert lambda_schedule(150, cfg) == pytest.approx(0.05)
        assert lambda_schedule(199, cfg) == pytest.approx(0.099)
        assert lambda_schedule(200, cfg) == 0.1
        assert lambda_schedule(999, cfg) == 0.1

    def test_out_of_range_iteration_rejected(self):
        cfg = TrainConfig(total_iters=10)
        for it in (-1, 10):
            with pytest.raises(ValueError, match="outside"):
                lambda_schedule(it, cfg)

    def test_zero_warmup_steps_immediately(self):
        cfg = TrainConfig(total_iters=100, warmup_iters=0, lambda_base=0.2)
        assert lambda_schedule(10, cfg) == 0.2


class TestAdam:
    def make(self, lr=0.1, clip=10.0):
        import mrvm_nerf.autodiff as ad
        ps = ad.ParamStore(0)
        ps.add("x", (2,), init="zeros")
        return ps, Adam(ps, ["x"], lr, clip_norm=clip)

    def test_first_step_closed_form(self):
        # m_hat = g, v_hat = g^2, so the first update is -lr * sign(g)
        ps, opt = self.make(lr=0.1)
        opt.step({"x": np.array([3.0, -7.0])})
        np.testing.assert_allclose(ps["x"], [-0.1, 0.1], atol=1e-8)

    def test_clip_triggers_and_scales(self):
        ps, opt = self.make(clip=1.0)
        assert opt.step({"x": np.array([30.0, 40.0])}) is True
        # after clipping the norm is 1, so m = 0.1 * g/50
        np.testing.assert_allclose(opt.m["x"], [0.06, 0.08])

    def test_no_clip_below_threshold(self):
        ps, opt = self.make(clip=100.0)
        assert opt.step({"x": np.array([3.0, 4.0])}) is False

    def test_minimizes_quadratic(self):
        ps, opt = self.make(lr=0.05)
        ps["x"] = np.array([2.0, -3.0])
        for _ in range(400):
            opt.step({"x": 2.0 * ps["x"]})
        np.testing.assert_allclose(ps["x"], 0.0, atol=1e-2)


class TestIterRng:
    def test_deterministic_per_iteration(self):
        a = iter_rng(7, 3).random(4)
        b = iter_rng(7, 3).random(4)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ_across_iterations_and_seeds(self):
        assert not np.array_equal(iter_rng(7, 3).random(4),
                                  iter_rng(7, 4).random(4))
        assert not np.array_equal(iter_rng(7, 3).random(4),
                                  iter_rng(8, 3).random(4))


class TestMakeBatch:
    def test_shapes_and_gt_consistency(self, tiny_scene_data):
        cfg = fast_cfg()
        batch = make_batch(tiny_scene_data, cfg, iter_rng(0, 0))
        assert len(batch.ref_images) == cfg.n_views
        assert batch.dirs.shape == (cfg.batch_rays, 3)
        assert batch.t_near.shape == (cfg.batch_rays,)
        assert np.all(batch.t_far > batch.t_near)
        assert batch.gt.shape == (cfg.batch_rays, 3)
        assert np.all((batch.gt >= 0) & (batch.gt <= 1))

    def test_references_distinct_train_views(self, tiny_scene_data):
        train_imgs = [tiny_scene_data.images[v]
                      for v in tiny_scene_data.train_views()]
        for it in range(10):
            batch = make_batch(tiny_scene_data, fast_cfg(), iter_rng(1, it))
            picked = [next(i for i, im in enumerate(train_imgs)
                           if np.array_equal(ref, im))
                      for ref in batch.ref_images]
            assert len(set(picked)) == len(picked)  # drawn without replacement

    def test_too_few_views_rejected(self, tiny_scene_data):
        with pytest.raises(ValueError, match="views"):
            make_batch(tiny_scene_data, fast_cfg(n_views=10), iter_rng(0, 0))


class TestCheckpointRoundtrip:
    def test_bit_exact(self, tmp_path):
        from mrvm_nerf.pipeline import Model
        cfg = fast_cfg(mrvm_mode="default")
        model = Model(cfg.model_config(), cfg.seed)
        opt = Adam(model.params, model.trainable_names("pretrain"), cfg.lr)
        opt.step({n: np.full_like(model.params[n], 0.01) for n in opt.names})
        p = tmp_path / "ck.bin"
        save_checkpoint(p, model, opt, 7, cfg)
        m2, o2, it, cfg2 = load_checkpoint(p)
        assert it == 7 and cfg2 == cfg and o2.t == opt.t
        for n in model.params.names():
            np.testing.assert_array_equal(m2.params[n], model.params[n])
        for n in model.target.names():
            np.testing.assert_array_equal(m2.target[n], model.target[n])
        for n in opt.names:
            np.testing.assert_array_equal(o2.m[n], opt.m[n])
            np.testing.assert_array_equal(o2.v[n], opt.v[n])

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)

    def test_corrupt_header_rejected(self, tmp_path):
        p = tmp_path / "bad.bin"
        blob = b"{not json"
        p.write_bytes(b"MRVMCKP1" + np.uint64(len(blob)).tobytes() + blob)
        with pytest.raises(ValueError, match="corrupt"):
            load_checkpoint(p)


class TestRun:
    def test_emits_metrics_and_checkpoints(self, tiny_dataset, tmp_path):
        cfg = fast_cfg()
        res = trainer.run(cfg, [tiny_dataset], "pretrain", tmp_path / "w")
        cols, rows = read_metrics(res["metrics"])
        assert cols == trainer.METRIC_COLUMNS
        assert len(rows) == cfg.total_iters
        assert [int(r[0]) for r in rows] == list(range(cfg.total_iters))
        assert (tmp_path / "w" / "checkpoint_000002.bin").exists()
        assert res["checkpoint"].exists()
        for r in rows:  # losses finite and recorded at full precision
            assert np.isfinite(float(r[1])) and np.isfinite(float(r[2]))

    def test_repeat_run_bit_identical(self, tiny_dataset, tmp_path):
        cfg = fast_cfg()
        a = trainer.run(cfg, [tiny_dataset], "pretrain", tmp_path / "a")
        b = trainer.run(cfg, [tiny_dataset], "pretrain", tmp_path / "b")
        _, ra = read_metrics(a["metrics"])
        _, rb = read_metrics(b["metrics"])
        assert [r[:-1] for r in ra] == [r[:-1] for r in rb]  # all but wallclock
        assert a["checkpoint"].read_bytes() == b["checkpoint"].read_bytes()

    def test_resume_is_bit_exact(self, tiny_dataset, tmp_path):
        cfg = fast_cfg()
        full = trainer.run(cfg, [tiny_dataset], "pretrain", tmp_path / "full")
        half = tmp_path / "full" / "checkpoint_000002.bin"
        resumed = trainer.run(cfg, [tiny_dataset], "pretrain",
                              tmp_path / "resumed", resume_from=half)
        assert full["checkpoint"].read_bytes() == resumed["checkpoint"].read_bytes()
        _, rows = read_metrics(resumed["metrics"])
        _, full_rows = read_metrics(full["metrics"])
        assert [r[:-1] for r in rows] == [r[:-1] for r in full_rows[2:]]

    def test_pretrain_updates_target_store(self, tiny_dataset, tmp_path):
        cfg = fast_cfg(total_iters=2, checkpoint_every=0)
        res = trainer.run(cfg, [tiny_dataset], "pretrain", tmp_path / "w")
        model = res["model"]
        fresh = type(model)(cfg.model_config(), cfg.seed)
        moved = any(not np.array_equal(model.target[n], fresh.target[n])
                    for n in model.target.names())
        assert moved

    def test_finetune_ignores_heads_and_target(self, tiny_dataset, tmp_path):
        cfg = fast_cfg(total_iters=2, checkpoint_every=0)
        res = trainer.run(cfg, [tiny_dataset], "finetune", tmp_path / "w")
        model, opt = res["model"], res["optimizer"]
        assert not any(n.startswith("heads/") for n in opt.names)
        fresh = type(model)(cfg.model_config(), cfg.seed)
        for n in model.target.names():
            np.testing.assert_array_equal(model.target[n], fresh.target[n])
        for n in model.params.names():
            if n.startswith("heads/"):
                np.testing.assert_array_equal(model.params[n], fresh.params[n])

    def test_finetune_from_pretrain_checkpoint_drops_heads(self, tiny_dataset,
                                                           tmp_path):
        cfg = fast_cfg(total_iters=2, checkpoint_every=0)
        pre = trainer.run(cfg, [tiny_dataset], "pretrain", tmp_path / "pre")
        ft = trainer.run(cfg, [tiny_dataset], "finetune", tmp_path / "ft",
                         resume_from=pre["checkpoint"])
        assert not any(n.startswith("heads/") for n in ft["optimizer"].names)
        _, rows = read_metrics(ft["metrics"])
        assert len(rows) == cfg.total_iters  # restarted at iteration 0

    def test_bad_mode_rejected(self, tiny_dataset, tmp_path):
        with pytest.raises(ValueError, match="mode"):
            trainer.run(fast_cfg(), [tiny_dataset], "train", tmp_path / "w")


class TestEvaluate:
    def test_report_structure(self, tiny_dataset, tmp_path):
        cfg = fast_cfg(total_iters=1, checkpoint_every=0)
        res = trainer.run(cfg, [tiny_dataset], "finetune", tmp_path / "w")
        scene = SceneData(tiny_dataset)
        rep = trainer.evaluate(res["model"], scene, cfg.n_views)
        assert [r["view"] for r in rep["views"]] == scene.test_views()
        assert np.isfinite(rep["mean_psnr"]) and np.isfinite(rep["mean_ssim"])
        assert all(r["psnr"] > 0 for r in rep["views"])
