"""End-to-end CLI tests: exit codes, flag handling, artifacts on disk."""

import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from regsynth.cli import main
from regsynth.trainer import infer, load_checkpoint
from regsynth.volumes import load_volume

GEN_FLAGS = ["--dims", "16", "--amplitude", "1.5", "--sigma", "4.0"]

CFG_TEMPLATE = """\
# smoke-scale run
data_dir = {data_dir}
patch = 16
batch = 1
epochs = 1
lr = 2e-4
poly_power = 0.9
lambda_anatomy = 0.5
lambda_smooth = 10.0
lambda_align = 20.0
channel_scale = 0.25
seed = 5
variant = BOTH+ACDS
adv_form = lsgan
hu_lo = -1000
hu_hi = 1000
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    for split, count, seed in (("train", 2, 11), ("val", 1, 12), ("test", 1, 13)):
        rc = main([
            "gen-phantoms", "--out", str(root / split),
            "--count", str(count), "--seed", str(seed), *GEN_FLAGS,
        ])
        assert rc == 0
    return root


def write_cfg(directory, data_dir, name="run.cfg", **edits):
    text = CFG_TEMPLATE.format(data_dir=data_dir)
    for key, value in edits.items():
        old = next(l for l in text.splitlines() if l.startswith(f"{key} ="))
        text = text.replace(old, f"{key} = {value}")
    path = Path(directory) / name
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def trained_run(dataset, tmp_path_factory):
    workdir = tmp_path_factory.mktemp("clirun")
    cfg_path = write_cfg(workdir, dataset)
    assert main(["train", "--config", str(cfg_path)]) == 0
    return workdir / "run_run"


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "gen-phantoms" in capsys.readouterr().out

    def test_no_subcommand_exits_one(self, capsys):
        assert main([]) == 1

    def test_unknown_flag_lists_valid_flags(self, capsys, tmp_path):
        rc = main(["gen-phantoms", "--out", str(tmp_path), "--count", "1",
                   "--frobnicate", "3"])
        assert rc == 1
        err = capsys.readouterr().err
        assert "--frobnicate" in err
        for flag in ("--out", "--count", "--seed", "--dims", "--amplitude", "--sigma"):
            assert flag in err

    def test_missing_required_flag_exits_one(self, capsys):
        assert main(["synthesize", "--input", "x.mivol", "--output", "y.mivol"]) == 1
        assert "--checkpoint" in capsys.readouterr().err

    def test_bad_flag_value_exits_one(self, capsys, tmp_path):
        assert main(["gen-phantoms", "--out", str(tmp_path), "--count", "no"]) == 1

    def test_missing_input_file_exits_one(self, capsys, tmp_path):
        rc = main(["synthesize", "--checkpoint", str(tmp_path / "none.bin"),
                   "--input", "a", "--output", "b"])
        assert rc == 1

    def test_diverging_run_exits_two(self, dataset, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path, dataset, name="diverge.cfg",
                             lr="1e6", epochs=2)
        assert main(["train", "--config", str(cfg_path)]) == 2
        assert "non-finite" in capsys.readouterr().err


class TestGenPhantoms:
    def test_deterministic_and_counted(self, tmp_path, capsys):
        for sub in ("a", "b"):
            rc = main(["gen-phantoms", "--out", str(tmp_path / sub),
                       "--count", "2", "--seed", "3", *GEN_FLAGS])
            assert rc == 0
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert len(manifest["cases"]) == 2
        files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files_a == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in files_a:
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_zero_amplitude_means_aligned_targets(self, tmp_path):
        rc = main(["gen-phantoms", "--out", str(tmp_path), "--count", "2",
                   "--seed", "4", "--dims", "16", "--amplitude", "0",
                   "--sigma", "4.0"])
        assert rc == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        for case in manifest["cases"]:
            aligned = load_volume(tmp_path / f"{case}_target_aligned.mivol")
            misaligned = load_volume(tmp_path / f"{case}_target_misaligned.mivol")
            np.testing.assert_array_equal(aligned.voxels, misaligned.voxels)

    def test_dims_triple_accepted(self, tmp_path):
        rc = main(["gen-phantoms", "--out", str(tmp_path), "--count", "1",
                   "--seed", "0", "--dims", "16,16,32", "--amplitude", "1",
                   "--sigma", "4"])
        assert rc == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        vol = load_volume(tmp_path / f"{manifest['cases'][0]}_source.mivol")
        assert vol.dims == (16, 16, 32)

    def test_bad_dims_exits_one(self, tmp_path, capsys):
        rc = main(["gen-phantoms", "--out", str(tmp_path), "--count", "1",
                   "--dims", "16,16"])
        assert rc == 1
        assert "--dims" in capsys.readouterr().err


class TestTrain:
    def test_echoes_config_and_writes_artifacts(self, trained_run, capsys):
        assert (trained_run / "ckpt_final.bin").is_file()
        assert (trained_run / "losses.csv").is_file()
        assert (trained_run / "losses.png").is_file()
        assert (trained_run / "config.snapshot").is_file()

    def test_echo_lists_resolved_values(self, dataset, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path, dataset, name="echo.cfg")
        assert main(["train", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "variant='BOTH+ACDS'" in out
        assert "lr=0.0002" in out

    def test_missing_key_exit_one_names_key(self, tmp_path, capsys):
        cfg = tmp_path / "broken.cfg"
        cfg.write_text("data_dir = somewhere\npatch = 16\n")
        assert main(["train", "--config", str(cfg)]) == 1
        err = capsys.readouterr().err
        assert "epochs" in err and "variant" in err

    def test_same_seed_same_csv(self, dataset, tmp_path):
        runs = []
        for sub in ("one", "two"):
            d = tmp_path / sub
            d.mkdir()
            cfg_path = write_cfg(d, dataset)
            assert main(["train", "--config", str(cfg_path)]) == 0
            runs.append((d / "run_run" / "losses.csv").read_bytes())
        assert runs[0] == runs[1]


class TestSynthesize:
    def test_output_matches_library_inference(self, dataset, trained_run, tmp_path):
        src = dataset / "test" / "case0000_source.mivol"
        out = tmp_path / "pred.mivol"
        ckpt_path = trained_run / "ckpt_final.bin"
        rc = main(["synthesize", "--checkpoint", str(ckpt_path),
                   "--input", str(src), "--output", str(out)])
        assert rc == 0
        written = load_volume(out)
        assert written.dims == (16, 16, 16)
        expected = infer(load_checkpoint(ckpt_path), load_volume(src)).volume
        np.testing.assert_array_equal(written.voxels, expected.voxels)
        # dims are multiples of 8, so no padding sidecar appears
        assert not out.with_name(out.name + ".meta.json").exists()


class TestEvaluate:
    def test_identical_dirs_score_perfectly(self, dataset, tmp_path, capsys):
        ref = dataset / "test"
        pred = tmp_path / "pred"
        pred.mkdir()
        manifest = json.loads((ref / "manifest.json").read_text())
        for case in manifest["cases"]:
            shutil.copy(ref / f"{case}_target_aligned.mivol",
                        pred / f"{case}_pred.mivol")
        out = tmp_path / "eval"
        rc = main(["evaluate", "--pred", str(pred), "--ref", str(ref),
                   "--out", str(out)])
        assert rc == 0
        rows = (out / "metrics.csv").read_text().splitlines()
        assert rows[0] == "case,mae_hu,psnr_db,ssim"
        assert len(rows) == 1 + len(manifest["cases"])
        for row in rows[1:]:
            _, mae, psnr, ssim = row.split(",")
            assert float(mae) == 0.0
            assert float(psnr) == float("inf")
            assert abs(float(ssim) - 1.0) < 1e-6
        assert (out / "metrics.png").is_file()
        assert (out / "summary.json").is_file()

    def test_missing_prediction_exits_one(self, dataset, tmp_path, capsys):
        pred = tmp_path / "empty"
        pred.mkdir()
        rc = main(["evaluate", "--pred", str(pred), "--ref", str(dataset / "test"),
                   "--out", str(tmp_path / "eval")])
        assert rc == 1


class TestAblate:
    def test_two_variants_two_rows(self, dataset, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path, dataset, name="abl.cfg")
        rc = main(["ablate", "--config", str(cfg_path),
                   "--variants", "BEF,BASELINE"])
        assert rc == 0
        root = tmp_path / "abl_ablation"
        rows = (root / "ablation.csv").read_text().splitlines()
        assert rows[0].startswith("variant,mae_mean")
        assert [r.split(",")[0] for r in rows[1:]] == ["BEF", "BASELINE"]
        assert (root / "ablation.png").is_file()
        assert (root / "bef_run" / "ckpt_final.bin").is_file()
        assert (root / "baseline_run" / "ckpt_final.bin").is_file()

    def test_unknown_variant_exits_one(self, dataset, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path, dataset, name="abl2.cfg")
        rc = main(["ablate", "--config", str(cfg_path), "--variants", "BOGUS"])
        assert rc == 1
        assert "BOGUS" in capsys.readouterr().err
