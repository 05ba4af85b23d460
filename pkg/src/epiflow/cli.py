"""Command line: ``epiflow <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 input error, 4 numerical
failure. Every command prints stable key=value or delimited text and, with an
output directory, writes the same files plus ``manifest.txt``. Replaying a
manifest (``epiflow --manifest DIR/manifest.txt``) re-runs the recorded command.
"""
from __future__ import annotations

import argparse
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import fileio
from .errors import ConfigError, EpiflowError, InputError, InsufficientData, NumericalError
from .geometry import NormalizedCorrespondenceSet, rotation_angle

SEED_ENV = "EPIFLOW_SEED"
EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3, 4
GRAD_TOL = 1e-3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


class Run:
    """Collects stdout text, output files and manifest inputs for one command."""

    def __init__(self, command, argv):
        self.command = command
        self.argv = argv
        self.lines = []
        self.files = {}
        self.inputs = []
        self.config = {}
        self.seed = None

    def emit(self, mapping):
        self.lines.append(fileio.format_keyvalue(mapping))

    def text(self, s):
        self.lines.append(s if s.endswith("\n") else s + "\n")

    def add_input(self, path):
        self.inputs.append(str(path))
        return path

    def manifest(self) -> str:
        m = {"command": self.command, "argv": shlex.join(self.argv), "version": __version__,
             "rng_seed": "none" if self.seed is None else int(self.seed)}
        for k, v in self.config.items():
            m[f"config.{k}"] = v
        for i, p in enumerate(self.inputs):
            m[f"input.{i}.path"] = p
            m[f"input.{i}.sha256"] = fileio.sha256(p)
        return fileio.format_keyvalue(m)

    def finish(self, out_dir):
        sys.stdout.write("".join(self.lines))
        if out_dir is None:
            return
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, writer in self.files.items():
            writer(out / name)
        (out / "manifest.txt").write_text(self.manifest())


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    if seed < 0:
        raise ConfigError(f"{SEED_ENV} must be non-negative")
    return seed


def _resolve_seed(flag, mapping):
    # --seed beats the config file, which beats the environment default
    if flag is not None:
        return int(flag)
    if "rng_seed" in mapping:
        return None
    env = _env_seed()
    return 0 if env is None else env


def _text_writer(text):
    return lambda p: Path(p).write_text(text)


# --- synth ------------------------------------------------------------------------

def cmd_synth(args, run: Run):
    from .synth import SceneConfig, generate_scene

    mapping = fileio.read_keyvalue(run.add_input(args.config)) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        mapping[k.strip()] = v.strip()
    seed = _resolve_seed(args.seed, mapping)
    if seed is not None:
        mapping["rng_seed"] = str(seed)
    cfg = SceneConfig.from_mapping(mapping)
    run.seed = cfg.rng_seed
    run.config = cfg.to_mapping()
    sc = generate_scene(cfg)

    idx = sc.sample_indices
    grid = sc.flow.pixel_grid()
    p1 = grid[idx]
    p2 = p1 + sc.flow_noisy.uv.reshape(-1, 2)[idx]
    labels = sc.sample_labels().astype(int)
    T2 = np.eye(4)
    T2[:3, :3] = sc.R.T
    T2[:3, 3] = -sc.R.T @ (sc.t * sc.scale)

    run.files = {
        "flow.flo": lambda p: fileio.write_flo(p, sc.flow_noisy),
        "flow_gt.flo": lambda p: fileio.write_flo(p, sc.flow),
        "flow_bwd.flo": lambda p: fileio.write_flo(p, sc.flow_backward),
        "pose.txt": lambda p: fileio.write_trajectory(p, [np.eye(4), T2]),
        "corr.txt": lambda p: fileio.write_correspondences(p, p1, p2, labels),
        "intrinsics.txt": lambda p: fileio.write_intrinsics(p, sc.K1, sc.K2),
        "image1.png": lambda p: fileio.write_image(p, sc.image1),
        "image2.png": lambda p: fileio.write_image(p, sc.image2),
        "occlusion.png": lambda p: fileio.write_mask(p, sc.non_occluded),
    }
    run.emit({
        "correspondences": len(idx),
        "outliers": int(np.sum(labels == 0)),
        "rotation_angle_rad": rotation_angle(sc.R),
        "t": sc.t,
        "scale": sc.scale,
        "non_occluded_fraction": float(sc.non_occluded.mean()),
    })


# --- estimate ---------------------------------------------------------------------

def _load_corr(args, run: Run):
    scene = Path(args.scene) if getattr(args, "scene", None) else None
    intr = args.intrinsics or (scene / "intrinsics.txt" if scene else None)
    if intr is None:
        raise InputError("--intrinsics is required without --scene")
    K1, K2 = fileio.read_intrinsics(run.add_input(intr))
    corr_path = getattr(args, "corr", None) or (scene / "corr.txt" if scene and not getattr(args, "flow", None) else None)
    if corr_path is not None:
        p1, p2, labels = fileio.read_correspondences(run.add_input(corr_path))
        if len(p1) < 5:
            raise InsufficientData(f"need at least 5 correspondences, got {len(p1)}")
        return NormalizedCorrespondenceSet.from_pixels(p1, p2, K1, K2), labels, (K1, K2)
    if getattr(args, "flow", None):
        flow = fileio.read_flo(run.add_input(args.flow))
        corr = NormalizedCorrespondenceSet.from_flow(flow, K1, K2)
        if len(corr) < 5:
            raise InsufficientData(f"need at least 5 correspondences, got {len(corr)}")
        return corr, None, (K1, K2)
    raise InputError("give --scene, --corr or --flow")


def _robust_config(args, run: Run):
    from .robust import RobustConfig

    mapping = fileio.read_keyvalue(run.add_input(args.config)) if args.config else {}
    if args.delta is not None:
        mapping["inlier_threshold"] = args.delta
    if args.hypotheses is not None:
        mapping["hypothesis_count"] = args.hypotheses
    seed = _resolve_seed(args.seed, mapping)
    if seed is not None:
        mapping["rng_seed"] = seed
    cfg = RobustConfig.from_mapping(mapping)
    run.seed = cfg.rng_seed
    return cfg


def _gt_pose(path):
    P = fileio.read_trajectory(path)
    if len(P) < 2:
        raise InputError(f"{path}: need two poses")
    T1 = np.vstack([P[0], [0, 0, 0, 1]])
    T2 = np.vstack([P[1], [0, 0, 0, 1]])
    rel = np.linalg.inv(T2) @ T1  # maps first-camera coordinates into the second
    R, t = rel[:3, :3], rel[:3, 3]
    n = np.linalg.norm(t)
    if n == 0:
        raise InputError(f"{path}: zero baseline")
    return R, t / n


def cmd_estimate(args, run: Run):
    from .pose import decompose_essential
    from .robust import estimate

    cfg = _robust_config(args, run)
    corr, _, _ = _load_corr(args, run)
    run.config = cfg.to_mapping()
    res = estimate(corr, cfg, threads=args.threads)
    voters = corr.subset(res.inlier_mask)
    pose = decompose_essential(res.E, voters)
    T = pose.camera_to_world()
    out = {
        "R": pose.R, "t": pose.t, "E": res.E,
        "inlier_count": int(res.inlier_mask.sum()),
        "objective": res.objective,
        "iterations": res.iterations,
        "pose_line": T[:3, :4],
    }
    out.update({k: v for k, v in res.diagnostics.items() if np.isscalar(v)})
    gt = args.gt_pose or (Path(args.scene) / "pose.txt" if args.scene else None)
    if gt is not None and Path(gt).exists():
        Rg, tg = _gt_pose(run.add_input(gt))
        out["rotation_error_rad"] = rotation_angle(pose.R.T @ Rg)
        out["translation_error_rad"] = float(np.arccos(np.clip(pose.t @ tg, -1.0, 1.0)))
    run.emit(out)
    text = fileio.format_keyvalue(out)
    mask_text = "".join(f"{int(b)}\n" for b in res.inlier_mask)
    run.files = {
        "result.txt": _text_writer(text),
        "inliers.txt": _text_writer(mask_text),
        "pose.txt": lambda p: fileio.write_trajectory(p, [np.eye(4), T]),
    }


# --- gradcheck --------------------------------------------------------------------

def _rel_err(a, f):
    a, f = np.asarray(a, dtype=float), np.asarray(f, dtype=float)
    nf = np.linalg.norm(f)
    d = np.linalg.norm(a - f)
    return float(d / nf) if nf > 0 else float(d)


def cmd_gradcheck(args, run: Run):
    from .implicit import dtheta_dflow, total_gradient
    from .losses import epipolar_loss
    from .robust import estimate, irls_refine

    if not args.step > 0:
        raise ConfigError("--step must be positive")
    if args.n_probes < 1:
        raise ConfigError("--n-probes must be at least 1")
    cfg = _robust_config(args, run)
    corr, _, _ = _load_corr(args, run)
    run.config = dict(cfg.to_mapping(), n_probes=args.n_probes, step=args.step)
    res = estimate(corr, cfg, threads=args.threads)
    g = dtheta_dflow(corr, res.params, cfg.inlier_threshold, res.inlier_mask)
    el = epipolar_loss(corr, res.params)
    tot = total_gradient(el.d_flow(corr), el.d_theta, g)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.rng_seed, 7])))
    inl = np.flatnonzero(res.inlier_mask)
    outl = np.flatnonzero(~res.inlier_mask)
    entries = 2 * np.repeat(inl, 2) + np.tile([0, 1], len(inl))
    probes = [(int(e), "inlier") for e in np.sort(rng.choice(entries, min(args.n_probes, len(entries)), replace=False))]
    if outl.size:
        probes.append((int(2 * rng.choice(outl) + rng.integers(2)), "outlier"))

    h = args.step
    rows = ["# entry pair component kind rel_err_dtheta rel_err_dloss status"]
    worst, flips = 0.0, 0
    for entry, kind in probes:
        i, c = divmod(entry, 2)
        sols = []
        for sgn in (1.0, -1.0):
            cp = corr.with_flow_offset(i, c, sgn * h)
            r = irls_refine(cp, res.params, cfg)
            sols.append((r, epipolar_loss(cp, r.params).value))
        (rp, lp), (rm, lm) = sols
        flipped = not (np.array_equal(rp.inlier_mask, res.inlier_mask)
                       and np.array_equal(rm.inlier_mask, res.inlier_mask))
        fd = (rp.params.theta - rm.params.theta) / (2 * h)
        e_theta = _rel_err(g.matrix[:, entry], fd)
        e_loss = _rel_err(tot[entry], (lp - lm) / (2 * h))
        if flipped:
            flips += 1
            status = "INLIER_FLIP"
        else:
            worst = max(worst, e_theta, e_loss)
            status = "ok" if max(e_theta, e_loss) < GRAD_TOL else "MISMATCH"
        rows.append(f"{entry} {i} {'uv'[c]} {kind} {e_theta:.6e} {e_loss:.6e} {status}")
    passed = flips == 0 and worst < GRAD_TOL
    summary = {"probes": len(probes), "max_rel_err": worst, "inlier_flips": flips,
               "hessian_condition": g.condition, "result": "PASS" if passed else "FAIL"}
    report = "\n".join(rows) + "\n" + fileio.format_keyvalue(summary)
    run.text(report)
    run.files = {"gradcheck.txt": _text_writer(report)}
    return EXIT_OK if passed else EXIT_NUMERICAL


# --- evaluation ---------------------------------------------------------------------

def cmd_eval_odom(args, run: Run):
    from .pose import Trajectory, relative_errors

    est = Trajectory(fileio.read_trajectory(run.add_input(args.est)))
    gt = Trajectory(fileio.read_trajectory(run.add_input(args.gt)))
    lengths = tuple(args.lengths) if args.lengths else tuple(range(100, 900, 100))
    run.config = {"lengths": lengths, "stride": args.stride}
    err = relative_errors(est, gt, lengths, args.stride)
    rows = ["# length t_err_percent r_err_deg_per_100 windows"]
    for L in sorted(err.per_length):
        t, r, n = err.per_length[L]
        rows.append(f"{L:g} {t:.10g} {r:.10g} {n}")
    text = "\n".join(rows) + "\n" + fileio.format_keyvalue({"t_err": err.t_err, "r_err": err.r_err})
    run.text(text)
    run.files = {"odometry.txt": _text_writer(text)}


def cmd_eval_flow(args, run: Run):
    from .pose import aepe

    flow = fileio.read_flo(run.add_input(args.flow))
    gt = fileio.read_flo(run.add_input(args.gt))
    mask = fileio.read_mask(run.add_input(args.mask)) if args.mask else None
    value = aepe(flow, gt, mask)
    text = fileio.format_keyvalue({"aepe": value})
    run.text(text)
    run.files = {"aepe.txt": _text_writer(text)}


def cmd_losses(args, run: Run):
    from .geometry import EssentialParams
    from .losses import compute_terms, load_preset, total_loss, LossWeights

    cfg = load_preset(args.preset)
    if args.config:
        over = fileio.read_keyvalue(run.add_input(args.config))
        cfg = LossWeights.from_mapping({**cfg.to_mapping(), **over})
    if args.mode:
        cfg = LossWeights.from_mapping({**cfg.to_mapping(), "mode": args.mode})
    run.config = dict(cfg.to_mapping(), preset=args.preset)

    scene = Path(args.scene) if args.scene else None

    def pick(value, default):
        if value:
            return value
        if scene is not None and default is not None:
            return scene / default
        return None

    paths = {
        "image1": pick(args.image1, "image1.png"), "image2": pick(args.image2, "image2.png"),
        "flow": pick(args.flow, "flow_gt.flo"), "flow_bwd": pick(args.flow_bwd, "flow_bwd.flo"),
    }
    missing = [k for k, v in paths.items() if v is None]
    if missing:
        raise InputError(f"missing inputs: {', '.join(missing)}")
    I1 = fileio.read_image(run.add_input(paths["image1"]))
    I2 = fileio.read_image(run.add_input(paths["image2"]))
    Vf = fileio.read_flo(run.add_input(paths["flow"]))
    Vb = fileio.read_flo(run.add_input(paths["flow_bwd"]))

    corr = params = None
    intr = pick(args.intrinsics, "intrinsics.txt")
    pose_path = pick(args.pose, "pose.txt")
    if cfg.lambda_e > 0 or (intr and pose_path and Path(intr).exists() and Path(pose_path).exists()):
        if intr is None or pose_path is None:
            raise InputError("the epipolar term needs --intrinsics and --pose")
        K1, K2 = fileio.read_intrinsics(run.add_input(intr))
        R, t = _gt_pose(run.add_input(pose_path))
        corr = NormalizedCorrespondenceSet.from_flow(Vf, K1, K2)
        params = EssentialParams.at_pose(R, t)

    teacher = occ = None
    if cfg.mode == "student":
        if not (args.teacher_flow and args.occ_mask):
            raise InputError("student mode needs --teacher-flow and --occ-mask")
        teacher = fileio.read_flo(run.add_input(args.teacher_flow))
        occ = fileio.read_mask(run.add_input(args.occ_mask))

    terms = compute_terms(I1, I2, Vf, Vb, cfg, corr, params, teacher, occ)
    total, breakdown = total_loss(terms, cfg)
    out = {}
    for key in ("p", "c", "s", "o"):
        if key in terms:
            for k, v in enumerate(terms[key], 1):
                out[f"L_{key}.scale{k}"] = float(v)
    if "e" in terms:
        out["L_e"] = float(terms["e"])
    for key, v in breakdown.items():
        out[f"weighted.{key}"] = v
    out["total"] = total
    for k, v in cfg.to_mapping().items():
        out[f"preset.{k}"] = v
    text = fileio.format_keyvalue(out)
    run.text(text)
    run.files = {"losses.txt": _text_writer(text)}


# --- entry point ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="epiflow", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"epiflow {__version__}")
    p.add_argument("--manifest", help="replay the command recorded in a manifest")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        sp.add_argument("--seed", type=int, default=None, help=f"RNG seed (default: ${SEED_ENV} or 0)")
        if out:
            sp.add_argument("--out", help="output directory")

    s = sub.add_parser("synth", help="generate a synthetic two-view scene")
    s.add_argument("out", help="output directory")
    s.add_argument("--config", help="scene key=value file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one scene key")
    common(s, out=False)

    def est_inputs(sp):
        sp.add_argument("--config", help="estimation key=value file")
        sp.add_argument("--intrinsics")
        sp.add_argument("--delta", type=float, help="inlier threshold")
        sp.add_argument("--hypotheses", type=int, help="RANSAC hypothesis count")

    e = sub.add_parser("estimate", help="robust relative pose from correspondences or flow")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--scene", help="scene directory (corr.txt, intrinsics.txt, pose.txt)")
    src.add_argument("--corr", help="correspondence table")
    src.add_argument("--flow", help="flow file; every valid pixel is a correspondence")
    e.add_argument("--gt-pose", help="two-line pose file to report errors against")
    est_inputs(e)
    common(e)

    g = sub.add_parser("gradcheck", help="finite-difference check of the implicit gradients")
    g.add_argument("scene", help="scene directory")
    g.add_argument("--n-probes", type=int, default=10)
    g.add_argument("--step", type=float, default=1e-5, help="flow perturbation in pixels")
    est_inputs(g)
    common(g)

    o = sub.add_parser("eval-odom", help="relative trajectory errors")
    o.add_argument("est")
    o.add_argument("gt")
    o.add_argument("--lengths", type=float, nargs="+")
    o.add_argument("--stride", type=int, default=1)
    common(o)

    f = sub.add_parser("eval-flow", help="average endpoint error")
    f.add_argument("flow")
    f.add_argument("gt")
    f.add_argument("--mask", help="PNG mask, white = evaluated")
    common(f)

    ls = sub.add_parser("losses", help="per-term loss breakdown")
    ls.add_argument("--scene")
    ls.add_argument("--preset", default="kitti_teacher")
    ls.add_argument("--config", help="key=value overrides of the preset")
    ls.add_argument("--mode", choices=("teacher", "student"))
    for name in ("image1", "image2", "flow", "flow-bwd", "intrinsics", "pose", "teacher-flow", "occ-mask"):
        ls.add_argument(f"--{name}")
    common(ls)
    return p


COMMANDS = {
    "synth": cmd_synth, "estimate": cmd_estimate, "gradcheck": cmd_gradcheck,
    "eval-odom": cmd_eval_odom, "eval-flow": cmd_eval_flow, "losses": cmd_losses,
}


def _recorded_argv(argv):
    # thread count and replay flags do not change results, so they are not recorded
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--threads", "--manifest"):
            skip = True
            continue
        if a.startswith("--threads=") or a.startswith("--manifest="):
            continue
        out.append(a)
    return out


def _replay(path):
    m = fileio.read_keyvalue(path)
    if "argv" not in m:
        raise InputError(f"{path}: not a manifest (no argv)")
    n = 0
    while f"input.{n}.path" in m:
        p = m[f"input.{n}.path"]
        if not Path(p).exists():
            raise InputError(f"manifest input {p} is missing")
        if fileio.sha256(p) != m[f"input.{n}.sha256"]:
            raise InputError(f"manifest input {p} has changed since the recorded run")
        n += 1
    return shlex.split(m["argv"])


def run_command(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.manifest:
        if args.command:
            raise ConfigError("--manifest replays a recorded command; give no other command")
        return run_command(_replay(args.manifest))
    if not args.command:
        raise ConfigError("no command given; see --help")
    if getattr(args, "threads", 1) < 1:
        raise ConfigError("--threads must be at least 1")
    run = Run(args.command, _recorded_argv(list(argv)))
    code = COMMANDS[args.command](args, run) or EXIT_OK
    run.finish(args.out)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return run_command(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EpiflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
