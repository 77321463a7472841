import numpy as np
import pytest

from litedepth.cli import main
from litedepth.config import RunConfig
from litedepth.pngio import read_f32, read_png
from litedepth.engine import set_default_dtype


@pytest.fixture(autouse=True)
def _f32(request):
    set_default_dtype("f32")
    yield


def run_cli(*argv):
    return main(list(argv))


class TestConfig:
    def test_every_section_addressable(self):
        cfg = RunConfig()
        assert "encoder.variant" in cfg.keys()
        assert "train.lr0" in cfg.keys()
        assert "loss.alpha" in cfg.keys()
        assert "data.width" in cfg.keys()

    def test_unknown_key_rejected(self):
        cfg = RunConfig()
        with pytest.raises(KeyError, match="unknown config key"):
            cfg.set("train.nonsense", "1")
        with pytest.raises(KeyError, match="section"):
            cfg.set("bogus.lr0", "1")

    def test_file_roundtrip(self, tmp_path):
        cfg = RunConfig()
        cfg.set("encoder.variant", "tiny")
        cfg.set("train.lr0", "0.001")
        cfg.set("loss.alpha", "0.5")
        text = cfg.to_text()
        p = tmp_path / "run.cfg"
        p.write_text(text)
        other = RunConfig()
        other.apply_file(p)
        assert other.to_text() == text

    def test_comments_and_blanks_ignored(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# a comment\n\ntrain.lr0 = 0.002  # trailing\n")
        cfg = RunConfig()
        cfg.apply_file(p)
        assert cfg.train.lr0 == 0.002

    def test_variant_switch_rederives_schedule(self):
        cfg = RunConfig()
        cfg.set("encoder.variant", "tiny")
        assert cfg.encoder.channels == (32, 32, 64, 128)
        assert cfg.encoder.dilation_schedule[2] == [1, 2, 3, 2, 4, 6]

    def test_dilation_schedule_parse(self):
        cfg = RunConfig()
        cfg.set("encoder.dilation_schedule", "1,2;1,2;1,2,5")
        cfg.set("encoder.cdc_repeats", "2,2,3")
        cfg.encoder.validate()
        assert cfg.encoder.dilation_schedule == ([1, 2], [1, 2], [1, 2, 5])

    def test_bad_bool_rejected(self):
        cfg = RunConfig()
        with pytest.raises(ValueError, match="boolean"):
            cfg.set("encoder.use_lgfi", "maybe")


class TestCliCommands:
    def test_usage_error_exits_one(self, capsys):
        assert run_cli("train") == 1          # missing --out
        assert "error" in capsys.readouterr().err

    def test_unknown_command_exits_one(self):
        assert run_cli("explode") == 1

    def test_help_lists_config_keys(self, capsys):
        assert run_cli("--help") == 0
        out = capsys.readouterr().out
        assert "encoder.use_lgfi" in out
        assert "train.lr0" in out
        assert "loss.alpha" in out

    def test_bench_reports_budgets(self, capsys):
        assert run_cli("bench", "--variant", "base") == 0
        out = capsys.readouterr().out
        assert "encoder params 2.84M" in out
        assert "reference 2.9M" in out
        assert "GMACs" in out

    def test_synth_writes_dataset_and_config(self, tmp_path, capsys):
        out = tmp_path / "scene"
        assert run_cli("synth", "--size", "64x32", "--frames", "3",
                       "--seed", "4", "--out", str(out)) == 0
        assert (out / "intrinsics.txt").exists()
        assert (out / "config.txt").exists()
        assert len(list((out / "frames").glob("*.png"))) == 3
        assert len(list((out / "depth").glob("*.f32"))) == 3
        cfg_text = (out / "config.txt").read_text()
        assert "data.scene_seed = 4" in cfg_text

    def test_synth_rejects_bad_size(self, tmp_path, capsys):
        assert run_cli("synth", "--size", "60x30", "--out",
                       str(tmp_path / "x")) == 2
        assert "divisible" in capsys.readouterr().err

    def test_train_infer_eval_roundtrip(self, tmp_path, capsys):
        run_dir = tmp_path / "run"
        rc = run_cli("train", "--variant", "tiny", "--size", "64x32",
                     "--frames", "4", "--steps", "2", "--batch", "2",
                     "--seed", "1", "--out", str(run_dir))
        assert rc == 0
        ckpt = run_dir / "checkpoints" / "final.lmck"
        assert ckpt.exists()
        assert (run_dir / "curves.csv").exists()
        assert (run_dir / "config.txt").exists()

        scene = tmp_path / "scene"
        assert run_cli("synth", "--size", "64x32", "--frames", "3",
                       "--seed", "9", "--out", str(scene)) == 0
        image = next((scene / "frames").glob("*.png"))
        out_dir = tmp_path / "infer"
        assert run_cli("infer", "--checkpoint", str(ckpt), "--image",
                       str(image), "--out", str(out_dir)) == 0
        stem = image.stem
        depth = read_f32(out_dir / f"{stem}_depth.f32")[0]
        assert depth.shape == (32, 64)
        assert depth.min() >= 0.1 - 1e-6 and depth.max() <= 80.0 + 1e-6
        mm = read_png(out_dir / f"{stem}_depth_mm.png")
        assert mm.dtype == np.uint16
        vis = read_png(out_dir / f"{stem}_depth_vis.png")
        assert vis.shape == (32, 128, 3)    # input and colorized depth side by side

        capsys.readouterr()
        assert run_cli("eval", "--checkpoint", str(ckpt), "--data",
                       str(scene)) == 0
        out = capsys.readouterr().out
        lines = [l for l in out.splitlines() if l.strip()]
        assert lines[0].split() == ["abs_rel", "sq_rel", "rmse", "rmse_log",
                                    "delta1", "delta2", "delta3"]
        assert len(lines[1].split()) == 7
        assert any(l.startswith("abs_rel=") for l in lines)

    def test_eval_without_depth_fails_cleanly(self, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert run_cli("train", "--variant", "tiny", "--size", "64x32",
                       "--frames", "4", "--steps", "1", "--batch", "2",
                       "--seed", "1", "--out", str(run_dir)) == 0
        scene = tmp_path / "scene"
        assert run_cli("synth", "--size", "64x32", "--frames", "3",
                       "--seed", "9", "--out", str(scene)) == 0
        for f in (scene / "depth").glob("*.f32"):
            f.unlink()
        rc = run_cli("eval", "--checkpoint",
                     str(run_dir / "checkpoints" / "final.lmck"),
                     "--data", str(scene))
        assert rc == 2
        assert "ground-truth" in capsys.readouterr().err

    def test_set_overrides_apply(self, tmp_path):
        run_dir = tmp_path / "run"
        assert run_cli("train", "--variant", "tiny", "--size", "64x32",
                       "--frames", "4", "--steps", "1", "--batch", "2",
                       "--out", str(run_dir),
                       "--set", "loss.alpha=0.5",
                       "--set", "encoder.use_lgfi=false") == 0
        text = (run_dir / "config.txt").read_text()
        assert "loss.alpha = 0.5" in text
        assert "encoder.use_lgfi = false" in text

    def test_gradcheck_subset_passes(self, capsys):
        assert run_cli("gradcheck") == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
        assert "checks passed" in out
