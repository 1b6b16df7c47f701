"""Command-line interface: exit codes, artifacts, metadata, sweeps."""
import json

import numpy as np
import pytest

from mrvm_nerf.cli import EXIT_DATA, EXIT_USAGE, main

FAST_TRAIN = ["--total-iters", "2", "--batch-rays", "4", "--n-views", "2",
              "--checkpoint-every", "0"]
FAST_MODEL = {"n_coarse": 4, "n_fine_extra": 2}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Two tiny generated scenes plus a fast TrainConfig JSON."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-scenes", "--out", str(data), "--count", "2",
                 "--width", "16", "--height", "16", "--n-views", "6"]) == 0
    cfg = root / "train.json"
    cfg.write_text(json.dumps(FAST_MODEL))
    return root, data, cfg


@pytest.fixture(scope="module")
def trained(corpus):
    root, data, cfg = corpus
    work = root / "pretrain"
    assert main(["pretrain", "--data", str(data), "--workdir", str(work),
                 "--config", str(cfg)] + FAST_TRAIN) == 0
    return work / "checkpoint_final.bin"


class TestGenScenes:
    def test_emits_manifests_and_metadata(self, corpus):
        _, data, _ = corpus
        assert (data / "scene_000" / "manifest.json").exists()
        assert (data / "scene_001" / "manifest.json").exists()
        meta = json.loads((data / "run_metadata.json").read_text())
        assert meta["command"] == "gen-scenes" and meta["config"]["count"] == 2

    def test_refuses_nonempty_without_force(self, corpus):
        _, data, _ = corpus
        assert main(["gen-scenes", "--out", str(data), "--count", "1"]) == EXIT_DATA

    def test_count_zero_noop(self, tmp_path, capsys):
        out = tmp_path / "empty"
        assert main(["gen-scenes", "--out", str(out), "--count", "0"]) == 0
        assert "nothing to do" in capsys.readouterr().out
        assert (out / "run_metadata.json").exists()

    def test_deterministic_across_invocations(self, tmp_path):
        for d in ("a", "b"):
            assert main(["gen-scenes", "--out", str(tmp_path / d), "--count", "1",
                         "--width", "12", "--height", "12", "--n-views", "3",
                         "--seed", "5"]) == 0
        img = "view_000.ppm"
        assert (tmp_path / "a" / "scene_000" / img).read_bytes() == \
               (tmp_path / "b" / "scene_000" / img).read_bytes()


class TestUsageErrors:
    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == EXIT_USAGE

    def test_missing_required_argument(self):
        with pytest.raises(SystemExit) as e:
            main(["gen-scenes", "--count", "1"])  # no --out
        assert e.value.code == EXIT_USAGE

    def test_unknown_mrvm_mode(self):
        with pytest.raises(SystemExit) as e:
            main(["pretrain", "--data", "x", "--workdir", "y",
                  "--mrvm-mode", "bogus"])
        assert e.value.code == EXIT_USAGE


class TestDataErrors:
    def test_missing_scene_dir(self, tmp_path):
        assert main(["pretrain", "--data", str(tmp_path / "nope"),
                     "--workdir", str(tmp_path / "w")] + FAST_TRAIN) == EXIT_DATA

    def test_invalid_config_json(self, corpus, tmp_path):
        _, data, _ = corpus
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        assert main(["pretrain", "--data", str(data), "--workdir",
                     str(tmp_path / "w"), "--config", str(bad)]) == EXIT_DATA

    def test_unknown_config_field(self, corpus, tmp_path):
        _, data, _ = corpus
        bad = tmp_path / "bad.json"
        bad.write_text('{"bogus_knob": 3}')
        assert main(["pretrain", "--data", str(data), "--workdir",
                     str(tmp_path / "w"), "--config", str(bad)]) == EXIT_DATA

    def test_render_missing_checkpoint(self, corpus, tmp_path):
        _, data, _ = corpus
        assert main(["render", "--ckpt", str(tmp_path / "no.bin"), "--scene",
                     str(data / "scene_000"), "--view", "0",
                     "--out", str(tmp_path / "o.ppm")]) == EXIT_DATA


class TestTrainCommands:
    def test_pretrain_artifacts(self, trained):
        work = trained.parent
        assert trained.exists()
        header = (work / "metrics.csv").read_text().splitlines()[0]
        assert header.split(",")[:2] == ["iter", "L_nerf_c"]
        meta = json.loads((work / "run_metadata.json").read_text())
        assert meta["command"] == "pretrain"
        assert meta["config"]["total_iters"] == 2

    def test_finetune_from_checkpoint(self, corpus, trained, tmp_path):
        _, data, cfg = corpus
        work = tmp_path / "ft"
        assert main(["finetune", "--data", str(data / "scene_000"),
                     "--workdir", str(work), "--config", str(cfg),
                     "--ckpt", str(trained)] + FAST_TRAIN) == 0
        assert (work / "checkpoint_final.bin").exists()


class TestRenderEval:
    def test_render_writes_image(self, corpus, trained, tmp_path):
        _, data, _ = corpus
        out = tmp_path / "view.ppm"
        assert main(["render", "--ckpt", str(trained), "--scene",
                     str(data / "scene_000"), "--view", "1",
                     "--out", str(out)]) == 0
        from mrvm_nerf.scenegen import read_ppm
        img = read_ppm(out)
        assert img.shape == (16, 16, 3)

    def test_render_view_out_of_range(self, corpus, trained, tmp_path):
        _, data, _ = corpus
        assert main(["render", "--ckpt", str(trained), "--scene",
                     str(data / "scene_000"), "--view", "99",
                     "--out", str(tmp_path / "o.ppm")]) == EXIT_DATA

    def test_eval_reports(self, corpus, trained, tmp_path):
        _, data, _ = corpus
        out = tmp_path / "eval"
        assert main(["eval", "--ckpt", str(trained), "--scene",
                     str(data / "scene_000"), "--out", str(out)]) == 0
        reports = json.loads((out / "eval_report.json").read_text())
        assert len(reports) == 1 and np.isfinite(reports[0]["mean_psnr"])
        csv_lines = (out / "eval_report.csv").read_text().splitlines()
        assert csv_lines[0] == "scene_id,view,psnr,ssim"
        assert len(csv_lines) == 1 + len(reports[0]["views"])


class TestSweeps:
    def test_ablate_mask_rows(self, corpus, tmp_path):
        _, data, cfg = corpus
        work = tmp_path / "am"
        assert main(["ablate-mask", "--data", str(data / "scene_000"),
                     "--workdir", str(work), "--config", str(cfg),
                     "--ratios", "0.25,0.75"] + FAST_TRAIN) == 0
        lines = (work / "ablate_mask.csv").read_text().splitlines()
        assert lines[0] == "ratio,psnr,ssim"
        assert [float(ln.split(",")[0]) for ln in lines[1:]] == [0.25, 0.75]

    def test_ablate_mask_bad_ratio(self, corpus, tmp_path):
        _, data, _ = corpus
        assert main(["ablate-mask", "--data", str(data), "--workdir",
                     str(tmp_path / "w"), "--ratios", "0.5,1.5"]) == EXIT_DATA

    def test_ablate_fewshot_rows(self, corpus, tmp_path):
        _, data, cfg = corpus
        work = tmp_path / "af"
        assert main(["ablate-fewshot", "--data", str(data / "scene_001"),
                     "--workdir", str(work), "--config", str(cfg),
                     "--configs", "4:2", "--total-iters", "2",
                     "--batch-rays", "4", "--checkpoint-every", "0"]) == 0
        lines = (work / "ablate_fewshot.csv").read_text().splitlines()
        assert lines[0] == "train_views,ref_views,psnr,ssim"
        assert lines[1].startswith("4,2,")
