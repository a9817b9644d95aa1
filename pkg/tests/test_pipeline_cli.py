import math
import shutil

import numpy as np
import pytest

from misr import cli
from misr.errors import (
    AnalysisError,
    ConfigurationError,
    ContractError,
    ImageIOError,
    NumericalError,
    SynchronizationError,
)
from misr.imageio import read_image, read_manifest, write_image
from misr.interp import interp_fuse
from misr.metrics import psnr
from misr.phantoms import disk, resolution_chart
from misr.pipeline import (
    RunConfig,
    cmd_bench,
    cmd_degrade,
    cmd_pipeline,
    cmd_reconstruct,
    load_frames,
)
from misr.scg import initial_estimate
from misr.system import DegradationSpec


@pytest.fixture
def gt_png(tmp_path):
    path = tmp_path / "gt.png"
    write_image(path, resolution_chart(48, 48), bit_depth=16)
    return path


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


class TestRunConfig:
    def test_defaults(self):
        c = RunConfig()
        assert (c.lam, c.alpha, c.n_iter, c.scale, c.k) == (0.05, 0.4, 20, 2, 4)
        assert c.shifts == [(0.0, 0.0), (0.5, 0.0), (0.5, 0.5), (0.0, 0.5)]
        assert c.noise_sigma == 1 / 255

    def test_grid_pattern_at_3x(self):
        c = RunConfig(scale=3)
        assert c.pattern == "grid" and c.k == 9

    def test_acquisition_window(self):
        assert RunConfig(exposure=0.45, rotation_latency=0.2).acquisition_window == pytest.approx(2.0)

    @pytest.mark.parametrize("kw", [dict(scale=0), dict(frames=5), dict(frames=0), dict(workers=0),
                                    dict(n_iter=-1), dict(exposure=-1), dict(format="tif"),
                                    dict(bit_depth=12), dict(lam=0), dict(blur_size=2),
                                    dict(shift_pattern="spiral"), dict(noise_sigma=-0.1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            RunConfig(**kw)

    def test_large_scale_frame_sizes(self):
        spec = RunConfig().degradation_spec(4096, 4096)
        assert spec.lr_shape == (2048, 2048) and spec.k == 4


class TestDegrade:
    def test_writes_frames_and_manifest(self, tmp_path, gt_png):
        paths = cmd_degrade(RunConfig(input=str(gt_png), output=str(tmp_path / "f"), seed=5))
        assert [p.name for p in paths] == [f"frame_0{i}.raw" for i in range(4)]
        m = read_manifest(tmp_path / "f" / "manifest.txt")
        assert m["seed"] == "5" and m["scale"] == "2" and m["frames"] == "4"
        assert (m["lr_width"], m["lr_height"]) == ("24", "24")
        assert set(RunConfig.__dataclass_fields__) <= set(m)

    def test_single_unshifted_noise_free_frame_is_binned_gt(self, tmp_path, gt_png):
        code, _ = run(["degrade", gt_png, tmp_path / "f", "--frames", "1", "--blur-size", "1",
                       "--noise-sigma", "0"])
        assert code == 0
        gt = read_image(gt_png).to_array()
        binned = gt.reshape(24, 2, 24, 2).mean(axis=(1, 3))
        np.testing.assert_array_equal(read_image(tmp_path / "f" / "frame_00.raw").to_array(),
                                      binned.astype(np.float32))

    def test_same_seed_byte_identical(self, tmp_path, gt_png):
        out = tmp_path / "f"
        assert run(["degrade", gt_png, out, "--seed", "9"])[0] == 0
        first = {f.name: f.read_bytes() for f in out.iterdir()}
        shutil.rmtree(out)
        assert run(["degrade", gt_png, out, "--seed", "9"])[0] == 0
        assert {f.name: f.read_bytes() for f in out.iterdir()} == first
        assert run(["degrade", gt_png, tmp_path / "g", "--seed", "10"])[0] == 0
        assert (tmp_path / "g" / "frame_00.raw").read_bytes() != first["frame_00.raw"]

    def test_unreadable_input(self, tmp_path, capsys):
        code, out = run(["degrade", tmp_path / "missing.png", tmp_path / "f"], capsys)
        assert code == ImageIOError.exit_code
        assert "missing.png" in out.err

    def test_bad_dimensions(self, tmp_path, capsys):
        write_image(tmp_path / "odd.png", np.zeros((15, 16)))
        code, out = run(["degrade", tmp_path / "odd.png", tmp_path / "f"], capsys)
        assert code == ConfigurationError.exit_code
        assert "divisible" in out.err
        assert not (tmp_path / "f").exists() or not any((tmp_path / "f").iterdir())

    def test_color_frames(self, tmp_path):
        rgb = np.stack([resolution_chart(32, 32), np.full((32, 32), 0.5), 1 - resolution_chart(32, 32)], axis=-1)
        from PIL import Image

        Image.fromarray((rgb * 255).round().astype(np.uint8)).save(tmp_path / "c.png")
        cmd_degrade(RunConfig(input=str(tmp_path / "c.png"), output=str(tmp_path / "f"), format="png"))
        out = tmp_path / "sr.png"
        cmd_reconstruct(RunConfig(input=str(tmp_path / "f"), output=str(out), n_iter=3))
        assert Image.open(out).mode == "RGB" and Image.open(out).size == (32, 32)


class TestReconstruct:
    @pytest.fixture
    def frames(self, tmp_path, gt_png):
        cmd_degrade(RunConfig(input=str(gt_png), output=str(tmp_path / "f"), seed=1))
        return tmp_path / "f"

    def test_beats_interpolation(self, tmp_path, frames, gt_png):
        out = tmp_path / "sr.raw"
        assert run(["reconstruct", frames, out, "--trace", tmp_path / "t.csv"])[0] == 0
        gt = read_image(gt_png)
        _, model, ys, _ = load_frames(frames)
        base = interp_fuse(ys, model.spec.shifts, 2)
        assert psnr(gt, read_image(out)) > psnr(gt, base)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0].startswith("iter,f_c") and len(lines) == 22

    def test_worker_counts_agree(self, tmp_path, frames):
        # 48 HR rows cannot host 4 bands of >= 12 rows plus halo, so use a taller image
        write_image(tmp_path / "tall.png", resolution_chart(96, 48), bit_depth=16)
        cmd_degrade(RunConfig(input=str(tmp_path / "tall.png"), output=str(tmp_path / "t"), seed=1))
        imgs = []
        for g in (1, 4):
            out = tmp_path / f"sr{g}.raw"
            assert run(["reconstruct", tmp_path / "t", out, "-g", g])[0] == 0
            imgs.append(read_image(out).to_array())
        assert np.abs(imgs[0] - imgs[1]).max() <= 1e-5 * np.ptp(imgs[0])

    def test_zero_iterations_is_initializer(self, tmp_path, frames):
        out = tmp_path / "x0.raw"
        assert run(["reconstruct", frames, out, "--n-iter", "0"])[0] == 0
        _, model, ys, _ = load_frames(frames)
        np.testing.assert_array_equal(read_image(out).to_array(),
                                      initial_estimate(ys, model).astype(np.float32))

    def test_manifest_mismatch_refused(self, tmp_path, frames, capsys):
        code, out = run(["reconstruct", frames, tmp_path / "sr.raw", "--blur-std", "0.8"], capsys)
        assert code == ConfigurationError.exit_code and "--force" in out.err
        assert not (tmp_path / "sr.raw").exists()
        assert run(["reconstruct", frames, tmp_path / "sr.raw", "--blur-std", "0.8", "--force",
                    "--n-iter", "1"])[0] == 0

    def test_matching_flags_accepted(self, tmp_path, frames):
        assert run(["reconstruct", frames, tmp_path / "sr.raw", "--scale", "2", "--n-iter", "1"])[0] == 0

    def test_missing_frame(self, tmp_path, frames, capsys):
        (frames / "frame_02.raw").unlink()
        code, out = run(["reconstruct", frames, tmp_path / "sr.raw"], capsys)
        assert code == ImageIOError.exit_code and "frame_02" in out.err

    def test_inconsistent_manifest(self, tmp_path, frames):
        text = (frames / "manifest.txt").read_text().replace("hr_width=48", "hr_width=40")
        (frames / "manifest.txt").write_text(text)
        assert run(["reconstruct", frames, tmp_path / "sr.raw"])[0] == ConfigurationError.exit_code

    def test_failure_removes_partial_outputs(self, tmp_path, frames):
        (tmp_path / "trace_dir").mkdir()
        code, _ = run(["reconstruct", frames, tmp_path / "sr.raw", "--trace", tmp_path / "trace_dir",
                       "--n-iter", "1"])
        assert code == ImageIOError.exit_code
        assert not (tmp_path / "sr.raw").exists()

    def test_numerical_failure_exit_code(self, tmp_path, frames, monkeypatch):
        def boom(*a, **k):
            raise NumericalError("non-finite delta", worker=0, stage="delta")

        monkeypatch.setattr("misr.pipeline.reconstruct", boom)
        assert run(["reconstruct", frames, tmp_path / "sr.raw"])[0] == NumericalError.exit_code
        assert not (tmp_path / "sr.raw").exists()

    def test_deterministic_outputs(self, tmp_path, frames):
        for name in ("a", "b"):
            run(["reconstruct", frames, tmp_path / f"{name}.raw", "--trace", tmp_path / f"{name}.csv"])
        assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestPipeline:
    def test_hidden_when_window_is_generous(self, tmp_path):
        cfg = RunConfig(views=4, view_size=16, exposure=0.1, n_iter=5, output=str(tmp_path))
        report = cmd_pipeline(cfg)
        assert report.verdict == "hidden"
        assert [j.view for j in report.jobs] == [0, 1, 2, 3]
        assert all(j.latency <= report.window for j in report.jobs)
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "report.csv", "view_000.raw", "view_001.raw", "view_002.raw", "view_003.raw"]
        assert (tmp_path / "report.csv").read_text().strip().endswith("verdict,hidden")

    def test_zero_window_not_hidden(self):
        report = cmd_pipeline(RunConfig(views=3, view_size=16, exposure=0.0, n_iter=3))
        assert report.window == 0
        assert report.verdict == "not hidden"
        assert [j.view for j in report.jobs] == [0, 1, 2]

    def test_arrivals_follow_the_schedule(self):
        report = cmd_pipeline(RunConfig(views=3, view_size=8, exposure=0.05, rotation_latency=0.1, n_iter=1))
        window = 4 * 0.05 + 0.1
        for j in report.jobs:
            assert j.arrival == pytest.approx((j.view + 1) * 0.2 + j.view * 0.1, abs=0.05)
            assert j.start >= j.arrival
        assert report.window == pytest.approx(window)

    def test_directory_source_skips_incomplete_views(self, tmp_path, gt_png):
        src = tmp_path / "views"
        for v in range(3):
            cmd_degrade(RunConfig(input=str(gt_png), output=str(src / f"view_{v:03d}"), seed=v))
        (src / "view_001" / "frame_03.raw").unlink()
        report = cmd_pipeline(RunConfig(input=str(src), exposure=0.0, n_iter=2))
        assert [(j.view, j.status) for j in report.jobs] == [(0, "done"), (1, "skipped"), (2, "done")]
        assert "frame_03" in report.jobs[1].note
        assert "1,skipped" in report.to_csv()

    def test_cli_report(self, capsys):
        code, out = run(["pipeline", "--views", "2", "--view-size", "8", "--exposure", "0", "--n-iter", "1"], capsys)
        assert code == 0
        lines = out.out.strip().splitlines()
        assert lines[0].startswith("view,status,arrival_s")
        assert lines[-1] == "verdict,not hidden"


class TestMetricsCommand:
    def test_gt_vs_gt(self, tmp_path, gt_png, capsys):
        code, out = run(["metrics", "--reference", gt_png, gt_png], capsys)
        assert code == 0
        row = out.out.splitlines()[1].split(",")
        assert row[1] == "inf" and float(row[2]) == 1.0

    @pytest.mark.parametrize("phantom", ["chart", "disk"])
    def test_sr_beats_interpolation_on_both_metrics(self, tmp_path, phantom, capsys):
        image = resolution_chart(64, 64) if phantom == "chart" else disk(64, 64, (31.6, 32.2), 20, blur_sigma=0.8)
        write_image(tmp_path / "gt.raw", image)
        assert run(["degrade", tmp_path / "gt.raw", tmp_path / "f"])[0] == 0
        assert run(["reconstruct", tmp_path / "f", tmp_path / "sr.raw"])[0] == 0
        _, model, ys, _ = load_frames(tmp_path / "f")
        write_image(tmp_path / "interp.raw", interp_fuse(ys, model.spec.shifts, 2))
        capsys.readouterr()
        code, out = run(["metrics", "--reference", tmp_path / "gt.raw", tmp_path / "sr.raw",
                         tmp_path / "interp.raw"], capsys)
        assert code == 0
        sr, base = (line.split(",") for line in out.out.splitlines()[1:3])
        assert float(sr[1]) > float(base[1])
        assert float(sr[2]) > float(base[2])

    def test_mismatch_reported_per_pair(self, tmp_path, gt_png, capsys):
        write_image(tmp_path / "small.png", np.zeros((8, 8)))
        code, out = run(["metrics", "--reference", gt_png, tmp_path / "small.png", gt_png], capsys)
        lines = out.out.splitlines()
        assert "differs" in lines[1] and lines[2].split(",")[1] == "inf"
        assert code == ConfigurationError.exit_code

    def test_mtf(self, tmp_path, capsys):
        write_image(tmp_path / "d.raw", disk(64, 64, (31.6, 32.2), 20, blur_sigma=1.0))
        code, out = run(["metrics", "--mtf", tmp_path / "d.raw", "--center", "31.6", "32.2", "--radius", "20",
                         "--curve", tmp_path / "c.csv"], capsys)
        assert code == 0
        mtf10 = float(out.out.splitlines()[1].split(",")[1])
        assert 0.1 < mtf10 < 0.5
        assert (tmp_path / "c.csv").read_text().startswith("frequency,magnitude")

    def test_mtf_bad_disk(self, tmp_path, capsys):
        write_image(tmp_path / "d.raw", np.full((32, 32), 0.5))
        code, _ = run(["metrics", "--mtf", tmp_path / "d.raw", "--center", "16", "16", "--radius", "10"], capsys)
        assert code == AnalysisError.exit_code

    def test_needs_reference(self, tmp_path, gt_png, capsys):
        assert run(["metrics", gt_png], capsys)[0] == ConfigurationError.exit_code


class TestBench:
    def test_grid_and_consensus_fraction(self):
        rows = cmd_bench(RunConfig(), sizes=(16, 32), iterations=(2, 4), workers=(1, 2))
        assert [(r.size, r.g, r.n_iter) for r in rows] == [
            (s, g, n) for s in (16, 32) for g in (1, 2) for n in (2, 4)]
        for r in rows:
            assert r.status == "ok"
            assert 0 <= r.consensus_fraction < 1
            assert r.wall_s > 0
        assert all(a.wall_s <= b.wall_s for a, b in zip(rows[::2], rows[1::2]))

    def test_memory_skip_note(self):
        rows = cmd_bench(RunConfig(), sizes=(16,), iterations=(2,), workers=(1,), memory_limit=1)
        assert rows[0].status == "skipped" and "GiB" in rows[0].note

    def test_cli_table(self, tmp_path, capsys):
        code, out = run(["bench", "--sizes", "16", "--iterations", "1", "2", "--g-values", "1",
                         "--output", tmp_path / "b.csv"], capsys)
        assert code == 0
        assert out.out == (tmp_path / "b.csv").read_text()
        assert out.out.splitlines()[0].startswith("lr_size,g,n_iter,status")


def test_exit_codes_distinct():
    codes = [e.exit_code for e in (ContractError, ConfigurationError, ImageIOError, NumericalError,
                                   SynchronizationError, AnalysisError)]
    assert len(set(codes)) == len(codes) and 0 not in codes
