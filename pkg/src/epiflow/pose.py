"""Relative pose recovery, trajectory composition and evaluation metrics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (CheiralityAmbiguous, EmptyMask, InputError, InsufficientTrajectory,
                     ScaleUndefined, TriangulationDegenerate)
from .geometry import FlowField, NormalizedCorrespondenceSet, canonical_essential

PARALLEL_TOL = 1e-12
DEFAULT_LENGTHS = tuple(range(100, 900, 100))

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RelativePose:
    """Second camera ``[R | t]``: ``X2 = R X1 + t`` with unit ``t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
            raise InputError("R is not a proper rotation")
        n = np.linalg.norm(t)
        if n == 0:
            raise InputError("translation direction must be non-zero")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t / n)

    @property
    def essential(self) -> np.ndarray:
        from .geometry import essential_from_pose
        return essential_from_pose(self.R, self.t)

    def camera_to_world(self, scale: float = 1.0) -> np.ndarray:
        """4x4 pose of the second camera expressed in the first camera frame."""
        T = np.eye(4)
        T[:3, :3] = self.R.T
        T[:3, 3] = -self.R.T @ (self.t * scale)
        return T


def _triangulate_many(x1, x2, R, t):
    """Midpoint triangulation; returns points, depths in both views and a usable mask."""
    d1 = x1
    d2 = x2 @ R  # R^T x2, rows
    c2 = -R.T @ t
    # minimise |a d1 - (c2 + b d2)| over (a, b)
    A11 = np.einsum("ni,ni->n", d1, d1)
    A12 = -np.einsum("ni,ni->n", d1, d2)
    A22 = np.einsum("ni,ni->n", d2, d2)
    r1 = d1 @ c2
    r2 = -(d2 @ c2)
    det = A11 * A22 - A12 * A12
    sin2 = det / (A11 * A22)
    ok = sin2 > PARALLEL_TOL ** 2
    safe = np.where(ok, det, 1.0)
    a = (A22 * r1 - A12 * r2) / safe
    b = (A11 * r2 - A12 * r1) / safe
    P1 = a[:, None] * d1
    P2 = c2 + b[:, None] * d2
    X = 0.5 * (P1 + P2)
    depth1 = X[:, 2]
    depth2 = (X @ R.T + t)[:, 2]
    gap = np.linalg.norm(P1 - P2, axis=1)
    return X, depth1, depth2, gap, ok


def triangulate(x, x2, pose: RelativePose):
    """Midpoint triangulation of one correspondence.

    Returns ``(X, depth1, depth2, gap)`` where ``gap`` is the distance between
    the closest points of the two rays.
    """
    x = np.asarray(x, dtype=float).reshape(1, 3)
    x2 = np.asarray(x2, dtype=float).reshape(1, 3)
    X, d1, d2, gap, ok = _triangulate_many(x, x2, pose.R, pose.t)
    if not ok[0]:
        raise TriangulationDegenerate("rays are parallel")
    return X[0], float(d1[0]), float(d2[0]), float(gap[0])


def pose_candidates(E):
    """The four ``(R, t)`` decompositions of ``E``."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=float))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def decompose_essential(E, corr: NormalizedCorrespondenceSet) -> RelativePose:
    """Cheirality-voted decomposition of ``E`` into ``(R, t)``."""
    if len(corr) < 1:
        raise InputError("need at least one correspondence to vote")
    best, best_votes, total = None, -1, 0
    for R, t in pose_candidates(E):
        _, d1, d2, _, ok = _triangulate_many(corr.x1, corr.x2, R, t)
        votes = int(np.sum(ok & (d1 > 0) & (d2 > 0)))
        total = int(ok.sum())
        if votes > best_votes:
            best, best_votes = (R, t), votes
    if total == 0 or 2 * best_votes <= total:
        raise CheiralityAmbiguous(f"best candidate has {best_votes} of {total} points in front")
    return RelativePose(*best)


@dataclass
class Trajectory:
    """Camera-to-world poses ``(n, 4, 4)`` with frame indices."""

    poses: np.ndarray
    frames: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.poses, dtype=float)
        if P.ndim == 3 and P.shape[1:] == (3, 4):
            P = np.concatenate([P, np.tile([[[0.0, 0.0, 0.0, 1.0]]], (len(P), 1, 1))], axis=1)
        if P.ndim != 3 or P.shape[1:] != (4, 4):
            raise InputError(f"poses must be (n, 4, 4) or (n, 3, 4), got {P.shape}")
        self.poses = P
        self.frames = np.arange(len(P)) if self.frames is None else np.asarray(self.frames, dtype=int)

    def __len__(self):
        return len(self.poses)

    def path_lengths(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.poses[:, :3, 3], axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


def _inv(T):
    out = np.eye(4)
    out[:3, :3] = T[:3, :3].T
    out[:3, 3] = -T[:3, :3].T @ T[:3, 3]
    return out


def compose_trajectory(rel_poses, gt: Trajectory) -> Trajectory:
    """Chain relative poses from the identity, scaling every step to the ground-truth length.

    ``rel_poses[i]`` maps frame ``i`` to frame ``i + 1`` (``X_{i+1} = R X_i + t``)
    and may be a :class:`RelativePose` or an ``(R, t)`` pair of any scale.
    """
    if len(rel_poses) != len(gt) - 1:
        raise InputError(f"need {len(gt) - 1} relative poses, got {len(rel_poses)}")
    out = [np.eye(4)]
    for i, rel in enumerate(rel_poses):
        R, t = (rel.R, rel.t) if isinstance(rel, RelativePose) else rel
        R = np.asarray(R, dtype=float)
        t = np.asarray(t, dtype=float)
        step_gt = np.linalg.norm((_inv(gt.poses[i]) @ gt.poses[i + 1])[:3, 3])
        nt = np.linalg.norm(t)
        step = np.eye(4)
        step[:3, :3] = R.T
        if step_gt == 0 or nt == 0:
            if nt > 0:
                warnings.warn(f"ground-truth step {i} has zero length; translation dropped", ScaleUndefined)
        else:
            step[:3, 3] = -R.T @ (t * (step_gt / nt))
        out.append(out[-1] @ step)
    return Trajectory(np.stack(out), gt.frames.copy())


def _delta_errors(dgt, dest):
    """Translation and rotation gap of ``inv(dgt) @ dest``, exactly zero when the two agree.

    Uses ``||Ra - Rb||_F = 2 sqrt(2) sin(angle / 2)`` rather than the trace of a product.
    """
    Rg = dgt[:3, :3]
    t = np.linalg.norm(Rg.T @ (dest[:3, 3] - dgt[:3, 3]))
    chord = np.linalg.norm(dest[:3, :3] - Rg) / (2.0 * np.sqrt(2.0))
    return float(t), float(2.0 * np.arcsin(min(chord, 1.0)))


@dataclass
class OdometryErrors:
    t_err: float  # percent
    r_err: float  # degrees per 100 m
    per_length: dict  # length -> (t_err %, r_err deg/100m, window count)


def relative_errors(est: Trajectory, gt: Trajectory, lengths=DEFAULT_LENGTHS, stride: int = 1) -> OdometryErrors:
    """Sub-sequence relative translation (%) and rotation (deg / 100 m) errors.

    For every start frame (every ``stride`` frames) and length ``L`` the window
    ends at the first frame whose ground-truth path distance exceeds ``L``.
    Errors of the window's delta pose are divided by ``L``.
    """
    if len(est) != len(gt):
        raise InputError(f"trajectories differ in length: {len(est)} vs {len(gt)}")
    dist = gt.path_lengths()
    usable = [L for L in lengths if dist[-1] > L]
    if not usable:
        raise InsufficientTrajectory(
            f"ground-truth path is {dist[-1]:.3f} long, shorter than every evaluated length", usable)
    t_all, r_all = [], []
    table = {}
    for L in lengths:
        te, re = [], []
        for i in range(0, len(gt), stride):
            later = np.flatnonzero(dist[i:] > dist[i] + L)
            if later.size == 0:
                continue
            j = i + int(later[0])
            dgt = _inv(gt.poses[i]) @ gt.poses[j]
            dest = _inv(est.poses[i]) @ est.poses[j]
            dt, dr = _delta_errors(dgt, dest)
            te.append(dt / L)
            re.append(dr / L)
        if te:
            table[L] = (100.0 * float(np.mean(te)), 100.0 * np.degrees(float(np.mean(re))), len(te))
            t_all.extend(te)
            r_all.extend(re)
    return OdometryErrors(100.0 * float(np.mean(t_all)), 100.0 * np.degrees(float(np.mean(r_all))), table)


def aepe(flow: FlowField, flow_gt: FlowField, valid=None) -> float:
    """Average endpoint error over valid pixels."""
    a = flow.uv if isinstance(flow, FlowField) else np.asarray(flow, dtype=float)
    b = flow_gt.uv if isinstance(flow_gt, FlowField) else np.asarray(flow_gt, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"flow shapes differ: {a.shape} vs {b.shape}")
    if valid is None:
        valid = flow_gt.valid_mask if isinstance(flow_gt, FlowField) else np.ones(a.shape[:2], bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != a.shape[:2]:
        raise InputError("mask does not match the flow grid")
    if not valid.any():
        raise EmptyMask("no valid pixels")
    d = a[valid] - b[valid]
    return float(np.mean(np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)))


def canonical_pose(R, t):
    """Representative of ``(R, t)`` modulo the sign of ``E``.

    ``E`` is flipped to its canonical sign by negating ``t``; of the remaining
    twisted pair the rotation with the smaller angle is kept.
    """
    from .geometry import essential_from_pose

    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float) / np.linalg.norm(t)
    E = essential_from_pose(R, t)
    if not np.allclose(canonical_essential(E), E * (np.sqrt(2) / np.linalg.norm(E))):
        t = -t
    twist = (2.0 * np.outer(t, t) - np.eye(3)) @ R
    if np.trace(twist) > np.trace(R):
        R, t = twist, -t
    return R, t
