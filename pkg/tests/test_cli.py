import csv

import numpy as np
import pytest

from corrseg import config as C
from corrseg.cli import GRIDS, main
from corrseg.imageio import read_pnm
from corrseg.model import init_params, load_checkpoint

TINY = """# miniature run
image_size = 16
num_stages = 2
channels = 3,4
epochs = 1
train_episodes = 3
eval_episodes = 2
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture
def trained(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    return out


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_round_trip(self, tmp_path):
        run = C.build({"epochs": "3", "channels": "8,12", "use_distill": "false", "fold": "2"})
        path = tmp_path / "c.txt"
        run.write(path)
        again = C.load(path)
        assert again == run
        assert again.train.channels == (8, 12) and again.train.use_distill is False

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("epochs = 2\nwarp_speed = 9\n")
        with pytest.raises(C.ConfigError):
            C.load(path)

    def test_bad_value(self):
        with pytest.raises(C.ConfigError):
            C.build({"epochs": "many"})

    def test_invalid_combination(self):
        with pytest.raises(C.ConfigError):
            C.build({"matching": "both"})

    def test_overrides(self):
        assert C.parse_overrides(["--lr", "0.1", "--num-stages=2"]) == {"lr": "0.1", "num_stages": "2"}
        with pytest.raises(C.ConfigError):
            C.parse_overrides(["--nope", "1"])
        with pytest.raises(C.ConfigError):
            C.parse_overrides(["--lr"])

    def test_every_key_is_overridable(self):
        run = C.build({})
        for key, value in run.as_dict().items():
            assert key in C.parse_overrides([f"--{key}", C.format_value(value)])


class TestTrain:
    def test_writes_artifacts(self, trained):
        assert {p.name for p in trained.iterdir()} >= {"model.ckpt", "metrics.csv", "config.txt"}
        rows = read_rows(trained / "metrics.csv")
        assert rows[0] == ["epoch", "train_loss", "ce", "kl", "heldout_miou", "fbiou"]
        assert len(rows) == 2
        assert "epochs = 1" in (trained / "config.txt").read_text()

    def test_zero_epochs_checkpoint_is_init(self, tmp_path, cfg_file):
        out = tmp_path / "zero"
        assert main(["train", "--config", str(cfg_file), "--epochs", "0", "--out", str(out)]) == 0
        run = C.load(out / "config.txt")
        got = load_checkpoint(out / "model.ckpt", run.train)
        assert np.array_equal(got.flat(), init_params(run.train).flat())

    def test_rerun_identical(self, tmp_path, cfg_file, trained):
        out = tmp_path / "again"
        assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
        assert (out / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
        assert (out / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()

    def test_config_errors_exit_1(self, tmp_path, cfg_file, capsys):
        assert main(["train", "--config", str(cfg_file), "--warp", "9", "--out", str(tmp_path / "x")]) == 1
        assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 1
        assert main(["nonsense"]) == 1
        assert "error" in capsys.readouterr().err

    def test_numerical_failure_exit_2(self, tmp_path, cfg_file):
        assert main(["train", "--config", str(cfg_file), "--lr", "1e6", "--epochs", "3",
                     "--out", str(tmp_path / "nan")]) == 2

    def test_env_output_root(self, tmp_path, cfg_file, monkeypatch):
        monkeypatch.setenv("CORRSEG_OUT", str(tmp_path / "root"))
        assert main(["dump-episodes", "--config", str(cfg_file), "--count", "1"]) == 0
        assert (tmp_path / "root" / "dump-episodes" / "manifest.tsv").exists()


class TestEval:
    @pytest.mark.parametrize("k", [1, 5])
    def test_report(self, tmp_path, trained, k):
        out = tmp_path / f"eval{k}"
        assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--kshot", str(k), "--out", str(out)]) == 0
        rows = read_rows(out / "eval.csv")
        assert rows[0] == ["fold", "shots", "checkpoint", "miou", "fbiou"]
        assert rows[1][1] == str(k) and rows[-1][0] == "mean"

    def test_mean_is_unweighted_average(self, tmp_path, cfg_file):
        cks = []
        for fold in (0, 1):
            out = tmp_path / f"f{fold}"
            assert main(["train", "--config", str(cfg_file), "--fold", str(fold), "--out", str(out)]) == 0
            cks += ["--checkpoint", str(out / "model.ckpt")]
        assert main(["eval", *cks, "--out", str(tmp_path / "ev")]) == 0
        rows = read_rows(tmp_path / "ev" / "eval.csv")[1:]
        assert [r[0] for r in rows] == ["0", "1", "mean"]
        assert float(rows[2][3]) == pytest.approx((float(rows[0][3]) + float(rows[1][3])) / 2, abs=1e-12)

    def test_incompatible_checkpoint(self, tmp_path, trained):
        assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--num-stages", "3",
                     "--out", str(tmp_path / "bad")]) == 1

    def test_missing_checkpoint_flag(self, tmp_path, cfg_file):
        assert main(["eval", "--config", str(cfg_file), "--out", str(tmp_path / "e")]) == 1


class TestAblate:
    def test_table_has_one_row_per_variant(self, tmp_path, cfg_file):
        out = tmp_path / "abl"
        assert main(["ablate", "--config", str(cfg_file), "--grid", "matching", "--seeds", "0,1",
                     "--out", str(out)]) == 0
        rows = read_rows(out / "ablate.csv")
        assert rows[0][:6] == ["variant", "miou", "miou_std", "params", "forward_ms", "macs"]
        assert [r[0] for r in rows[1:]] == [v.name for v in GRIDS["matching"]]
        assert len(read_rows(out / "ablate_seeds.csv")) == 1 + 2 * len(GRIDS["matching"])

    def test_stage_grid_params_monotone(self, tmp_path, cfg_file):
        out = tmp_path / "stages"
        assert main(["ablate", "--config", str(cfg_file), "--image-size", "64", "--grid", "stages",
                     "--seeds", "0", "--epochs", "0", "--eval-episodes", "1", "--out", str(out)]) == 0
        params = [int(r[3]) for r in read_rows(out / "ablate.csv")[1:]]
        macs = [int(r[5]) for r in read_rows(out / "ablate.csv")[1:]]
        assert len(params) == 4
        assert all(b > a for a, b in zip(params, params[1:]))
        assert all(b > a for a, b in zip(macs, macs[1:]))

    def test_unknown_grid(self, tmp_path, cfg_file):
        assert main(["ablate", "--config", str(cfg_file), "--grid", "everything", "--out", str(tmp_path / "a")]) == 1


class TestGradcheck:
    def test_clean_build_passes(self, tmp_path):
        out = tmp_path / "gc"
        assert main(["gradcheck", "--skip-model", "--out", str(out)]) == 0
        rows = read_rows(out / "gradcheck.csv")[1:]
        assert rows and all(r[2] == "pass" and float(r[1]) < 1e-4 for r in rows)

    def test_injected_bug_detected(self, tmp_path):
        out = tmp_path / "gc"
        assert main(["gradcheck", "--skip-model", "--inject-sign-bug", "--out", str(out)]) == 2
        status = {r[0]: r[2] for r in read_rows(out / "gradcheck.csv")[1:]}
        assert status.pop("injected") == "FAIL"
        assert set(status.values()) == {"pass"}


class TestHeatmaps:
    def test_outputs(self, tmp_path, cfg_file, trained):
        out = tmp_path / "hm"
        assert main(["heatmaps", "--config", str(cfg_file), "--checkpoint", str(trained / "model.ckpt"),
                     "--episode-seed", "3", "--out", str(out)]) == 0
        stage_maps = sorted(p.name for p in out.glob("stage*_corr.pgm"))
        assert stage_maps == ["stage1_corr.pgm", "stage2_corr.pgm"]
        assert (out / "pred_mask.pgm").exists() and (out / "gt_mask.pgm").exists()
        assert (out / "manifest.tsv").exists()
        assert read_pnm(out / "stage1_corr.pgm").shape == (4, 4)
        assert read_pnm(out / "gt_mask.pgm").shape == (16, 16)
        for name in stage_maps:
            img = read_pnm(out / name)
            assert (img.min(), img.max()) in {(0, 255), (128, 128)}

    def test_three_stages(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("epochs = 0\ntrain_episodes = 1\neval_episodes = 1\n")
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(run_dir)]) == 0
        out = tmp_path / "hm"
        assert main(["heatmaps", "--config", str(cfg), "--checkpoint", str(run_dir / "model.ckpt"),
                     "--out", str(out)]) == 0
        assert len(list(out.glob("stage*_corr.pgm"))) == 3
        assert len(list(out.glob("*_mask.pgm"))) == 2
