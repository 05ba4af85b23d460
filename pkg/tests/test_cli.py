import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from epiflow import cli, fileio

SMALL = ["--set", "width=320", "--set", "height=120", "--set", "num_points=400", "--set", "fx=400",
         "--set", "fy=400"]


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


def snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir())}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "scene"
    assert cli.main(["synth", str(d), *SMALL, "--set", "translation_mode=uniform", "--seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def noisy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "noisy"
    args = ["synth", str(d), "--set", "width=640", "--set", "height=480", "--set", "fx=1600", "--set", "fy=1600",
            "--set", "depth_min=3", "--set", "depth_max=30", "--set", "translation_mode=lateral",
            "--set", "num_points=300", "--set", "noise_sigma=0.5", "--set", "outlier_fraction=0.2", "--seed", "1"]
    assert cli.main(args) == 0
    return d


def test_synth_outputs(scene_dir):
    names = {p.name for p in scene_dir.iterdir()}
    assert {"flow.flo", "flow_gt.flo", "flow_bwd.flo", "pose.txt", "corr.txt", "intrinsics.txt",
            "manifest.txt", "image1.png", "image2.png", "occlusion.png"} <= names
    m = fileio.read_keyvalue(scene_dir / "manifest.txt")
    assert m["command"] == "synth" and m["rng_seed"] == "3" and m["config.width"] == "320"
    assert "version" in m


def test_synth_bad_key(tmp_path, capsys):
    code, out = run(["synth", tmp_path / "x", "--set", "widht=3"], capsys)
    assert code == 2 and "widht" in out.err
    (tmp_path / "c.cfg").write_text("colour = red\n")
    code, out = run(["synth", tmp_path / "y", "--config", tmp_path / "c.cfg"], capsys)
    assert code == 2 and "colour" in out.err


def test_synth_deterministic(tmp_path):
    d = tmp_path / "s"
    assert cli.main(["synth", str(d), *SMALL, "--seed", "11"]) == 0
    first = snapshot(d)
    shutil.rmtree(d)
    assert cli.main(["synth", str(d), *SMALL, "--seed", "11", "--threads", "4"]) == 0
    assert snapshot(d) == first


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("EPIFLOW_SEED", "5")
    assert cli.main(["synth", str(tmp_path / "env"), *SMALL]) == 0
    assert fileio.read_keyvalue(tmp_path / "env" / "manifest.txt")["rng_seed"] == "5"
    (tmp_path / "c.cfg").write_text("rng_seed = 7\n")
    assert cli.main(["synth", str(tmp_path / "cfg"), *SMALL, "--config", str(tmp_path / "c.cfg")]) == 0
    assert fileio.read_keyvalue(tmp_path / "cfg" / "manifest.txt")["rng_seed"] == "7"
    assert cli.main(["synth", str(tmp_path / "flag"), *SMALL, "--config", str(tmp_path / "c.cfg"),
                     "--seed", "9"]) == 0
    assert fileio.read_keyvalue(tmp_path / "flag" / "manifest.txt")["rng_seed"] == "9"
    monkeypatch.setenv("EPIFLOW_SEED", "x")
    assert cli.main(["synth", str(tmp_path / "bad"), *SMALL]) == 2


def test_estimate_noise_free(scene_dir, tmp_path, capsys):
    code, out = run(["estimate", "--scene", scene_dir, "--hypotheses", 64, "--out", tmp_path / "e"], capsys)
    assert code == 0
    res = fileio.parse_keyvalue(out.out)
    assert float(res["rotation_error_rad"]) < 1e-6
    assert int(res["inlier_count"]) == 400
    assert {"result.txt", "inliers.txt", "pose.txt", "manifest.txt"} <= {p.name for p in (tmp_path / "e").iterdir()}
    assert len(fileio.read_trajectory(tmp_path / "e" / "pose.txt")) == 2


def test_estimate_from_flow(scene_dir, capsys):
    code, out = run(["estimate", "--flow", scene_dir / "flow_gt.flo", "--intrinsics", scene_dir / "intrinsics.txt",
                     "--gt-pose", scene_dir / "pose.txt", "--hypotheses", 16], capsys)
    assert code == 0
    # .flo stores float32, so the exact pose is recovered to single precision only
    assert float(fileio.parse_keyvalue(out.out)["rotation_error_rad"]) < 1e-4


def test_estimate_exit_codes(tmp_path, scene_dir, capsys):
    p = np.arange(8.0).reshape(4, 2)
    fileio.write_correspondences(tmp_path / "c.txt", p, p + 1)
    code, _ = run(["estimate", "--corr", tmp_path / "c.txt", "--intrinsics", scene_dir / "intrinsics.txt"], capsys)
    assert code == 3
    code, _ = run(["estimate", "--scene", scene_dir, "--delta", 0], capsys)
    assert code == 2
    code, _ = run(["estimate", "--corr", tmp_path / "missing.txt", "--intrinsics", scene_dir / "intrinsics.txt"],
                  capsys)
    assert code == 3
    code, _ = run(["estimate", "--corr", tmp_path / "c.txt"], capsys)
    assert code == 3
    code, _ = run(["frobnicate"], capsys)
    assert code == 2


def test_estimate_all_degenerate_is_numerical(tmp_path, scene_dir, capsys):
    p = np.tile([[10.0, 20.0]], (8, 1))
    fileio.write_correspondences(tmp_path / "c.txt", p, p + 1)
    code, _ = run(["estimate", "--corr", tmp_path / "c.txt", "--intrinsics", scene_dir / "intrinsics.txt",
                   "--hypotheses", 4], capsys)
    assert code == 4


def test_estimate_threads_identical(noisy_dir, tmp_path):
    outs = []
    for threads in (1, 4):
        d = tmp_path / "e"
        if d.exists():
            shutil.rmtree(d)
        assert cli.main(["estimate", "--scene", str(noisy_dir), "--hypotheses", "128", "--threads", str(threads),
                         "--out", str(d)]) == 0
        outs.append(snapshot(d))
    assert outs[0] == outs[1]


def test_manifest_replay(noisy_dir, tmp_path, capsys):
    d = tmp_path / "e"
    code, first_out = run(["estimate", "--scene", noisy_dir, "--hypotheses", 64, "--out", d], capsys)
    assert code == 0
    first = snapshot(d)
    shutil.copy(d / "manifest.txt", tmp_path / "m.txt")
    shutil.rmtree(d)
    code, again = run(["--manifest", tmp_path / "m.txt"], capsys)
    assert code == 0 and again.out == first_out.out
    assert snapshot(d) == first


def test_manifest_detects_changed_input(scene_dir, tmp_path, capsys):
    src = tmp_path / "scene"
    shutil.copytree(scene_dir, src)
    assert cli.main(["estimate", "--scene", str(src), "--hypotheses", "16", "--out", str(tmp_path / "e")]) == 0
    capsys.readouterr()
    with open(src / "corr.txt", "a") as fh:
        fh.write("# edited\n")
    code, out = run(["--manifest", tmp_path / "e" / "manifest.txt"], capsys)
    assert code == 3 and "changed" in out.err


def test_gradcheck_pass(noisy_dir, tmp_path, capsys):
    code, out = run(["gradcheck", noisy_dir, "--n-probes", 6, "--hypotheses", 64, "--out", tmp_path / "g"], capsys)
    assert code == 0, out.out
    rows = [r.split() for r in out.out.splitlines() if r and r[0].isdigit()]
    assert len(rows) == 7
    assert sum(r[3] == "outlier" for r in rows) == 1
    summary = fileio.parse_keyvalue("\n".join(line for line in out.out.splitlines() if "=" in line))
    assert summary["result"] == "PASS" and float(summary["max_rel_err"]) < 1e-3


def test_gradcheck_flags_flips(noisy_dir, capsys):
    code, out = run(["gradcheck", noisy_dir, "--n-probes", 60, "--hypotheses", 64, "--step", 1.0], capsys)
    assert code == 4
    assert "INLIER_FLIP" in out.out
    assert "inlier_flips = 0" not in out.out


def test_gradcheck_bad_step(noisy_dir, capsys):
    code, _ = run(["gradcheck", noisy_dir, "--step", 0], capsys)
    assert code == 2


def traj(n, s, eps=0.0):
    P = [np.eye(4)]
    step = np.eye(4)
    c, sn = np.cos(eps), np.sin(eps)
    step[:3, :3] = [[c, 0, sn], [0, 1, 0], [-sn, 0, c]]
    step[2, 3] = s
    for _ in range(n - 1):
        P.append(P[-1] @ step)
    return np.stack(P)


def test_eval_odom(tmp_path, capsys):
    fileio.write_trajectory(tmp_path / "gt.txt", traj(300, 1.0))
    code, out = run(["eval-odom", tmp_path / "gt.txt", tmp_path / "gt.txt", "--out", tmp_path / "o"], capsys)
    assert code == 0
    kv = fileio.parse_keyvalue("\n".join(line for line in out.out.splitlines() if "=" in line))
    assert float(kv["t_err"]) == 0.0 and float(kv["r_err"]) == 0.0
    assert (tmp_path / "o" / "odometry.txt").exists()
    fileio.write_trajectory(tmp_path / "est.txt", traj(300, 1.0, np.radians(0.01)))
    code, out = run(["eval-odom", tmp_path / "est.txt", tmp_path / "gt.txt", "--lengths", 100], capsys)
    assert code == 0
    k = 101
    q = np.arange(k) * np.radians(0.01)
    expect_t = 100 * np.hypot(np.sin(q).sum(), np.cos(q).sum() - k) / 100
    row = [line.split() for line in out.out.splitlines() if line.startswith("100 ")][0]
    assert float(row[1]) == pytest.approx(expect_t, rel=0.01)
    assert float(row[2]) == pytest.approx(k * 0.01, rel=0.01)


def test_eval_odom_short(tmp_path, capsys):
    fileio.write_trajectory(tmp_path / "gt.txt", traj(20, 1.0))
    code, _ = run(["eval-odom", tmp_path / "gt.txt", tmp_path / "gt.txt"], capsys)
    assert code == 3


def test_eval_flow(tmp_path, capsys):
    rng = np.random.default_rng(0)
    uv = rng.normal(size=(9, 11, 2))
    fileio.write_flo(tmp_path / "gt.flo", uv)
    code, out = run(["eval-flow", tmp_path / "gt.flo", tmp_path / "gt.flo"], capsys)
    assert code == 0 and fileio.parse_keyvalue(out.out)["aepe"] == "0.0"
    fileio.write_flo(tmp_path / "off.flo", uv + [3.0, 4.0])
    code, out = run(["eval-flow", tmp_path / "off.flo", tmp_path / "gt.flo"], capsys)
    assert abs(float(fileio.parse_keyvalue(out.out)["aepe"]) - 5.0) < 1e-5
    other = rng.normal(size=uv.shape)
    fileio.write_flo(tmp_path / "o.flo", other)
    mask = rng.random((9, 11)) > 0.3
    fileio.write_mask(tmp_path / "m.png", mask)
    code, out = run(["eval-flow", tmp_path / "o.flo", tmp_path / "gt.flo", "--mask", tmp_path / "m.png"], capsys)
    a = fileio.read_flo(tmp_path / "o.flo").uv
    b = fileio.read_flo(tmp_path / "gt.flo").uv
    brute = [np.hypot(*(a[y, x] - b[y, x])) for y in range(9) for x in range(11) if mask[y, x]]
    assert float(fileio.parse_keyvalue(out.out)["aepe"]) == pytest.approx(sum(brute) / len(brute), abs=1e-12)
    code, _ = run(["eval-flow", tmp_path / "nope.flo", tmp_path / "gt.flo"], capsys)
    assert code == 3


def test_losses_ground_truth(scene_dir, tmp_path, capsys):
    code, out = run(["losses", "--scene", scene_dir, "--out", tmp_path / "l"], capsys)
    assert code == 0
    kv = fileio.parse_keyvalue(out.out)
    assert float(kv["L_e"]) < 1e-9  # float32 flow file
    assert float(kv["preset.lambda_e"]) == 1000.0
    assert float(kv["preset.lambda_c"]) == 0.1
    assert min(float(kv[f"L_c.scale{k}"]) for k in range(1, 6)) >= (1e-6) ** 0.45 * (1 - 1e-9)


def test_losses_presets_echo(scene_dir, capsys):
    code, out = run(["losses", "--scene", scene_dir, "--preset", "kitti_baseline"], capsys)
    assert code == 0
    kv = fileio.parse_keyvalue(out.out)
    assert [float(kv[f"preset.lambda_{k}"]) for k in "pcse"] == [1.0, 0.1, 0.1, 0.0]
    code, _ = run(["losses", "--scene", scene_dir, "--preset", "imaginary"], capsys)
    assert code == 2


def test_losses_student_needs_teacher(scene_dir, capsys):
    code, _ = run(["losses", "--scene", scene_dir, "--preset", "kitti_student"], capsys)
    assert code == 3
    code, out = run(["losses", "--scene", scene_dir, "--preset", "kitti_student",
                     "--teacher-flow", scene_dir / "flow_gt.flo", "--occ-mask", scene_dir / "occlusion.png"], capsys)
    assert code == 0
    assert "L_o.scale1" in out.out


def test_losses_deterministic(scene_dir, tmp_path):
    outs = []
    for _ in range(2):
        d = tmp_path / "l"
        if d.exists():
            shutil.rmtree(d)
        assert cli.main(["losses", "--scene", str(scene_dir), "--out", str(d)]) == 0
        outs.append(snapshot(d))
    assert outs[0] == outs[1]


def test_console_script_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "epiflow.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("epiflow ")
    r = subprocess.run([sys.executable, "-m", "epiflow.cli"], capture_output=True, text=True)
    assert r.returncode == 2
