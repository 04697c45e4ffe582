import json
import time

import numpy as np
import pytest

from spiralforge import cli, tensorio, trajgen

SMALL = ["--set", "phantom.n_series=10", "--set", "phantom.n_frames=6", "--set", "phantom.size=16",
         "--set", "phantom.n_coils=2", "--set", "system.matrix=48", "--set", "training.widths=[2,4,4]",
         "--set", "training.batch=4"]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_trajgen_reports_fifteen_interleaves(tmp_path, capsys):
    code, out, _ = run(["trajgen", "--out", str(tmp_path), "--frames", "2"], capsys)
    assert code == 0 and "15 interleaves" in out
    manifest = json.loads((tmp_path / "trajectory.json").read_text())
    assert manifest["n_interleaves"] == 15
    back = trajgen.load_trajectory(tmp_path / "trajectory.json")
    direct = trajgen.assemble_trajectory(trajgen.optimized_config(), trajgen.GradientSystem(96 * 400 / 96, 96, 10.0), 2)
    assert back.coords.tobytes() == direct.coords.tobytes()


def test_invalid_rho_exits_1_naming_field(tmp_path, capsys):
    code, _, err = run(["trajgen", "--out", str(tmp_path), "--set", "trajectory.rho=0.5"], capsys)
    assert code == 1
    assert err.startswith("error=BoundsError") and "rho" in err
    assert len(err.strip().splitlines()) == 1


def test_usage_and_data_errors(tmp_path, capsys):
    assert run(["frobnicate"], capsys)[0] == 1
    assert run(["trajgen"], capsys)[0] == 1
    code, _, err = run(["train", "--data", str(tmp_path / "none"), "--traj-id", "x", "--out", str(tmp_path)], capsys)
    assert code == 2 and err.startswith("error=FormatError")
    code, _, err = run(["trajgen", "--out", str(tmp_path), "--set", "training.bogus=1"], capsys)
    assert code == 1


def test_evaluate_identity_gives_ssim_one(tmp_path, capsys):
    gt = np.random.default_rng(0).random((2, 10, 16, 16)).astype(np.float32)
    tensorio.write_tensor(tmp_path / "gt.tnsr", gt)
    code, _, _ = run(["evaluate", "--recon", str(tmp_path / "gt.tnsr"), "--truth", str(tmp_path / "gt.tnsr"),
                      "--out", str(tmp_path / "ev")], capsys)
    assert code == 0
    lines = (tmp_path / "ev" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "series_id,frame,nrmse,psnr_db,ssim,lape_ratio"
    assert all(float(row.split(",")[4]) == pytest.approx(1.0, abs=1e-12) for row in lines[1:])
    assert len(lines) == 1 + 2 * 5


def test_end_to_end_smoke(tmp_path, capsys):
    start = time.time()
    traj_dir, data, runs = tmp_path / "traj", tmp_path / "data", tmp_path / "run"
    assert run(["trajgen", "--out", str(traj_dir), *SMALL], capsys)[0] == 0
    assert run(["simulate", "--traj", str(traj_dir / "trajectory.json"), "--out", str(data), "--id", "opt", *SMALL],
               capsys)[0] == 0
    assert run(["train", "--data", str(data), "--traj-id", "opt", "--out", str(runs), "--epochs", "5", *SMALL],
               capsys)[0] == 0
    log = json.loads((runs / "train_log.json").read_text())
    assert log["epochs"] == 5 and len(log["val_history"]) == 5
    code, out, _ = run(["evaluate", "--model", str(runs / "model.ckpt"), "--data", str(data), "--traj-id", "opt",
                        "--out", str(tmp_path / "ev")], capsys)
    assert code == 0 and "ssim" in out
    agg = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    from spiralforge import phantom
    assert agg["n_series"] == len(phantom.split_indices(10)["test"]) and -1 <= agg["ssim"]["mean"] <= 1
    # resume continues the same run to a larger budget
    assert run(["train", "--data", str(data), "--traj-id", "opt", "--out", str(runs), "--epochs", "6", "--resume",
                *SMALL], capsys)[0] == 0
    assert json.loads((runs / "train_log.json").read_text())["epochs"] == 6
    # stream from ground truth and coil maps through the same trajectory
    ph, _, _ = phantom.load_dataset(data)
    tensorio.write_tensors(tmp_path / "in.tnsr", [ph.truth[0].astype(np.float32), ph.maps[0].astype(np.complex64)])
    code, out, _ = run(["stream", "--input", str(tmp_path / "in.tnsr"), "--traj", str(traj_dir / "trajectory.json"),
                        "--model", str(runs / "model.ckpt"), "--report", str(tmp_path / "lat.json"),
                        "--output", str(tmp_path / "out.tnsr"), *SMALL], capsys)
    assert code == 0 and "output period" in out
    assert json.loads((tmp_path / "lat.json").read_text())["frames_out"] == 2
    assert tensorio.read_tensor(tmp_path / "out.tnsr").shape == (2, 16, 16)
    assert time.time() - start < 600


def test_train_non_finite_exits_3(tmp_path, capsys):
    traj_dir, data = tmp_path / "traj", tmp_path / "data"
    run(["trajgen", "--out", str(traj_dir), *SMALL], capsys)
    run(["simulate", "--traj", str(traj_dir / "trajectory.json"), "--out", str(data), "--id", "opt", *SMALL], capsys)
    g = tensorio.read_tensor(data / "gridded_opt.tnsr")
    g[:] = np.nan
    tensorio.write_tensor(data / "gridded_opt.tnsr", g)
    code, _, err = run(["train", "--data", str(data), "--traj-id", "opt", "--out", str(tmp_path / "r"), "--epochs", "1",
                        *SMALL], capsys)
    assert code == 3 and err.startswith("error=NonFiniteLoss")


def test_hyperband_interrupt_resume_is_byte_identical(tmp_path, capsys):
    hb = SMALL + ["--set", "hyperband.R=3", "--set", "hyperband.final_epochs=1"]
    assert run(["hyperband", "--out", str(tmp_path / "a"), *hb], capsys)[0] == 0
    assert run(["hyperband", "--out", str(tmp_path / "b"), "--max-rungs", "2", *hb], capsys)[0] == 0
    assert not (tmp_path / "b" / "search_report.json").exists()
    code, _, err = run(["hyperband", "--out", str(tmp_path / "b"), *hb], capsys)
    assert code == 1 and "resume" in err
    assert run(["hyperband", "--out", str(tmp_path / "b"), "--resume", "--finalize", *hb], capsys)[0] == 0
    assert (tmp_path / "a" / "search_report.json").read_bytes() == (tmp_path / "b" / "search_report.json").read_bytes()
    assert (tmp_path / "b" / "final" / "metrics.json").exists()
