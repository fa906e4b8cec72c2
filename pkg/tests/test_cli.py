import numpy as np
import pytest

from link3d.cli import (
    EXIT_FAIL,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    load_config,
    main,
)
from link3d.errors import ConfigError


def run(args):
    return main(args)


class TestConfigParsing:
    def test_defaults(self):
        cfg = load_config("verify", None, [], None)
        assert cfg.s == 3 and cfg.r == 2 and cfg.mode == "pure"

    def test_set_overrides(self):
        cfg = load_config("verify", None, ["s=5", "mode=augmented"], None)
        assert cfg.s == 5 and cfg.mode == "augmented"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config("verify", None, ["sz=5"], None)

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config("verify", None, ["s=three"], None)

    def test_config_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# a comment\ns=7\nr=3\n\nmode=augmented\n")
        cfg = load_config("verify", str(path), ["r=2"], None)
        assert cfg.s == 7 and cfg.r == 2 and cfg.mode == "augmented"

    def test_config_file_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("voxels=12\n")
        with pytest.raises(ConfigError):
            load_config("verify", str(path), [], None)

    def test_presets(self):
        det = load_config("verify", None, ["preset=detection"], None)
        assert (det.s, det.r) == (7, 3)
        seg = load_config("verify", None, ["preset=segmentation"], None)
        assert (seg.s, seg.r) == (3, 2)

    def test_env_threads(self, monkeypatch):
        monkeypatch.setenv("LINK_THREADS", "4")
        assert load_config("bench", None, [], None).threads == 4

    def test_validation(self):
        with pytest.raises(ConfigError):
            load_config("verify", None, ["precision=16"], None)
        with pytest.raises(ConfigError):
            load_config("verify", None, ["groups=3", "channels=8"], None)


class TestVerifyCommand:
    def test_default_pure_passes(self, capsys):
        assert run(["verify"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "suite oracle_equivalence" in out
        assert "verify: PASS" in out

    def test_corrupted_gather_fails(self, capsys):
        assert run(["verify", "--set", "corrupt=drop-neighbor"]) == EXIT_FAIL
        out = capsys.readouterr().out
        assert "verify: FAIL (oracle_equivalence)" in out

    def test_augmented_skips_purity(self, capsys):
        assert run(["verify", "--set", "mode=augmented", "--set", "groups=2"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "suite sum_to_product: skipped (augmented)" in out
        assert "suite offset_purity: skipped (augmented)" in out

    def test_unknown_key_exits_2(self, capsys):
        assert run(["verify", "--set", "bogus=1"]) == EXIT_USAGE


SMALL_BENCH = [
    "--set", "n_points=4000", "--set", "extent=1.2", "--set", "s=3",
    "--set", "channels=4",
]


class TestBenchCommand:
    def test_csv_schema_and_param_invariance(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert run(["bench", *SMALL_BENCH, "--out", str(out)]) == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "kernel_extent,method,n_voxels,wall_ms,params"
        rows = [l.split(",") for l in lines[1:]]
        assert len(rows) == 7  # link and oracle at r in {1,3,5}, one conv3 row
        link_rows = [r for r in rows if r[1] == "link"]
        assert {r[0] for r in link_rows} == {"3", "9", "15"}
        assert len({r[4] for r in link_rows}) == 1
        oracle_rows = [r for r in rows if r[1] == "oracle"]
        assert len(oracle_rows) == 3
        conv_rows = [r for r in rows if r[1] == "conv3"]
        assert len(conv_rows) == 1 and conv_rows[0][4] == str(27 * 4 * 4)
        for r in rows:
            assert float(r[3]) > 0.0


    def test_deterministic_apart_from_wall_time(self, tmp_path):
        def masked(path):
            lines = path.read_text().strip().splitlines()
            rows = [l.split(",") for l in lines[1:]]
            return [r[:3] + r[4:] for r in rows]

        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        small = ["--set", "n_points=1500", "--set", "extent=0.8",
                 "--set", "s=3", "--set", "channels=2"]
        assert run(["bench", *small, "--out", str(a)]) == EXIT_OK
        assert run(["bench", *small, "--out", str(b)]) == EXIT_OK
        assert masked(a) == masked(b)


class TestErfCommand:
    ARGS = ["--set", "n_points=6000", "--set", "extent=1.0", "--set", "s=3",
            "--set", "channels=4", "--set", "stage=1"]

    def test_csv_schema_and_totals(self, tmp_path):
        out = tmp_path / "erf.csv"
        assert run(["erf", *self.ARGS, "--out", str(out)]) == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "x,y,z,magnitude"
        assert lines[-1].startswith("# radius90=")
        mags = np.array([float(l.split(",")[3]) for l in lines[1:-1]])
        assert (mags >= 0).all()
        total = float(lines[-1].split("total=")[1])
        np.testing.assert_allclose(mags.sum(), total, rtol=1e-9)

    def test_deterministic_output(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run(["erf", *self.ARGS, "--out", str(a)]) == EXIT_OK
        assert run(["erf", *self.ARGS, "--out", str(b)]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_empty_scene_usage_error(self, tmp_path):
        assert run(["erf", "--set", "n_points=0"]) == EXIT_USAGE

    def test_paired_slab_run_shows_wider_radius(self, tmp_path):
        # controlled comparison on a dense slab scan fed through the CLI
        xs, ys, zs = np.meshgrid(
            np.arange(96), np.arange(96), np.arange(4), indexing="ij"
        )
        centers = (np.stack([xs, ys, zs], axis=-1).reshape(-1, 3) + 0.5) * 0.05
        rng = np.random.default_rng(0)
        intensity = rng.uniform(0.5, 1.5, size=(centers.shape[0], 1))
        rec = np.concatenate([centers, intensity], axis=1).astype("<f4")
        scan = tmp_path / "slab.bin"
        scan.write_bytes(rec.tobytes())
        radii = {}
        for flag in ("true", "false"):
            out = tmp_path / f"erf_{flag}.csv"
            args = ["erf", "--set", f"input={scan}", "--set", "s=7",
                    "--set", "r=3", "--set", "stage=2", "--set", "channels=8",
                    "--set", f"link_branch={flag}", "--out", str(out)]
            assert run(args) == EXIT_OK
            trailer = out.read_text().strip().splitlines()[-1]
            radii[flag] = int(trailer.split("radius90=")[1].split()[0])
        assert radii["true"] > radii["false"]


TOY_ARGS = ["--set", "steps=6", "--set", "n_points=600", "--set", "channels=4",
            "--set", "max_voxels=80"]


class TestTrainToyCommand:
    def test_lr_zero_constant(self, tmp_path):
        out = tmp_path / "trace.csv"
        assert run(["train-toy", *TOY_ARGS, "--set", "lr=0", "--out", str(out)]) == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "step,loss"
        losses = {l.split(",")[1] for l in lines[1:]}
        assert len(lines) == 7 and len(losses) == 1

    def test_deterministic_output(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run(["train-toy", *TOY_ARGS, "--out", str(a)]) == EXIT_OK
        assert run(["train-toy", *TOY_ARGS, "--out", str(b)]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_loss_decreases(self, tmp_path):
        out = tmp_path / "trace.csv"
        args = ["train-toy", "--set", "steps=40", "--set", "n_points=600",
                "--set", "channels=6", "--set", "max_voxels=80",
                "--out", str(out)]
        assert run(args) == EXIT_OK
        lines = out.read_text().strip().splitlines()[1:]
        losses = [float(l.split(",")[1]) for l in lines]
        assert losses[-1] < losses[0]

    def test_divergence_reports_step_and_fails(self, tmp_path, capsys):
        # float32 overflows once the runaway logits pass ~3.4e38
        args = ["train-toy", *TOY_ARGS, "--set", "lr=1e8", "--set", "steps=40",
                "--set", "precision=32", "--out", str(tmp_path / "t.csv")]
        assert run(args) == EXIT_FAIL
        assert "non-finite loss" in capsys.readouterr().err

    def test_float32_training_runs(self, tmp_path):
        out = tmp_path / "trace.csv"
        args = ["train-toy", *TOY_ARGS, "--set", "precision=32",
                "--out", str(out)]
        assert run(args) == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 7


class TestInputAndExitCodes:
    def test_bin_input_accepted(self, tmp_path):
        scan = tmp_path / "scan.bin"
        rng = np.random.default_rng(0)
        rec = np.concatenate(
            [rng.uniform(-0.5, 0.5, (3000, 3)), rng.uniform(0, 1, (3000, 1))],
            axis=1,
        ).astype("<f4")
        scan.write_bytes(rec.tobytes())
        out = tmp_path / "erf.csv"
        args = ["erf", "--set", f"input={scan}", "--set", "s=3",
                "--set", "channels=4", "--set", "stage=1", "--out", str(out)]
        assert run(args) == EXIT_OK

    def test_bad_bin_exits_3(self, tmp_path, capsys):
        scan = tmp_path / "scan.bin"
        scan.write_bytes(b"\x01" * 18)
        assert run(["erf", "--set", f"input={scan}"]) == EXIT_IO

    def test_missing_input_exits_3(self, tmp_path):
        assert run(["erf", "--set", f"input={tmp_path}/absent.bin"]) == EXIT_IO

    def test_unreadable_config_exits_3(self, tmp_path):
        assert run(["verify", "--config", f"{tmp_path}/absent.cfg"]) == EXIT_IO
