"""Camera coordinates, the 5-parameter essential-matrix chart and epipolar algebra.

Conventions
-----------
* Pixels are ``(u, v)`` with ``u`` along the image width. Normalized points are
  homogeneous 3-vectors with last component 1.
* The second camera is ``P' = K'[R | t]``, so a point ``X`` in the first camera
  frame maps to ``R X + t`` in the second and ``E = [t]x R``.
* The chart: ``theta[:3]`` is a rotation vector applied on the left of a base
  rotation, ``R = exp([w]x) R0``; ``theta[3:]`` are exponential-map coordinates
  of the unit translation on the sphere around a base direction ``t0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ChartSingularity, InputError, InvalidIntrinsics

SQRT2 = np.sqrt(2.0)

_LEVI = np.zeros((3, 3, 3))
_LEVI[0, 1, 2] = _LEVI[1, 2, 0] = _LEVI[2, 0, 1] = 1.0
_LEVI[0, 2, 1] = _LEVI[2, 1, 0] = _LEVI[1, 0, 2] = -1.0

# generators [e_k]x
_GEN = np.stack([-_LEVI[k] for k in range(3)])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy, self.skew)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidIntrinsics(f"non-finite intrinsics {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidIntrinsics(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        K = self.matrix
        if abs(np.linalg.det(K)) < 1e-12 or np.linalg.cond(K) > 1e14:
            raise InvalidIntrinsics("intrinsics matrix is not invertible")
        # upper triangular with unit corner: closed form keeps round-trips tight
        fx, fy, s, cx, cy = self.fx, self.fy, self.skew, self.cx, self.cy
        return np.array([
            [1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy)],
            [0.0, 1.0 / fy, -cy / fy],
            [0.0, 0.0, 1.0],
        ])

    @classmethod
    def identity(cls) -> "CameraIntrinsics":
        return cls(1.0, 1.0, 0.0, 0.0)


def normalize_points(pixels, K: CameraIntrinsics) -> np.ndarray:
    """Map pixels ``(N, 2)`` onto the unit focal plane, returning ``(N, 3)``."""
    p = np.atleast_2d(np.asarray(pixels, dtype=float))
    Kinv = K.inverse
    x = p @ Kinv[:2, :2].T + Kinv[:2, 2]
    return np.column_stack([x, np.ones(len(p))])


def denormalize_points(points, K: CameraIntrinsics) -> np.ndarray:
    x = np.atleast_2d(np.asarray(points, dtype=float))
    x = x[:, :2] / x[:, 2:3]
    Km = K.matrix
    return x @ Km[:2, :2].T + Km[:2, 2]


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def unskew(S) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


# ---------------------------------------------------------------------------
# scalar helpers of s = |w|^2:  a(s) = sin(sqrt s)/sqrt s,  b(s) = (1 - cos sqrt s)/s

_NSERIES = 20
_A_COEF = np.array([(-1) ** n / factorial(2 * n + 1) for n in range(_NSERIES)])
_B_COEF = np.array([(-1) ** n / factorial(2 * n + 2) for n in range(_NSERIES)])


def _series(coef, s, order):
    n = np.arange(len(coef))
    if order == 0:
        c = coef
    elif order == 1:
        c = (n * coef)[1:]
    else:
        c = (n * (n - 1) * coef)[2:]
    return np.polynomial.polynomial.polyval(s, c)


def _ab(s):
    """a, a', a'', b, b', b'' at s >= 0 (derivatives with respect to s)."""
    if s < 4.0:
        return tuple(_series(c, s, k) for c in (_A_COEF, _B_COEF) for k in range(3))
    T = np.sqrt(s)
    sT, cT = np.sin(T), np.cos(T)
    a = sT / T
    a1 = (T * cT - sT) / (2 * T**3)
    a2 = (-T**2 * sT - 3 * T * cT + 3 * sT) / (4 * T**5)
    b = (1 - cT) / s
    b1 = (T * sT / 2 + cT - 1) / T**4
    b2 = (T**2 * cT - 5 * T * sT - 8 * cT + 8) / (4 * T**6)
    return a, a1, a2, b, b1, b2


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    a, _, _, b, _, _ = _ab(float(w @ w))
    W = skew(w)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def rotation_angle(R) -> float:
    """Angle of ``R`` in [0, pi]; atan2 keeps full precision near zero."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def _so3_derivatives(w):
    """exp([w]x) with its first (3,3,3) and second (3,3,3,3) derivatives."""
    w = np.asarray(w, dtype=float)
    a, a1, a2, b, b1, b2 = _ab(float(w @ w))
    W = skew(w)
    W2 = W @ W
    R = np.eye(3) + a * W + b * W2
    G = _GEN
    GW = np.einsum("kij,jl->kil", G, W) + np.einsum("ij,kjl->kil", W, G)  # G_k W + W G_k
    dR = (2 * a1 * w[:, None, None] * W + a * G
          + 2 * b1 * w[:, None, None] * W2 + b * GW)
    ww = np.outer(w, w)
    I3 = np.eye(3)
    GG = np.einsum("jab,kbc->jkac", G, G)
    GG = GG + GG.transpose(1, 0, 2, 3)
    d2R = ((4 * a2 * ww + 2 * a1 * I3)[:, :, None, None] * W
           + 2 * a1 * (w[None, :, None, None] * G[:, None] + w[:, None, None, None] * G[None, :])
           + (4 * b2 * ww + 2 * b1 * I3)[:, :, None, None] * W2
           + 2 * b1 * (w[None, :, None, None] * GW[:, None] + w[:, None, None, None] * GW[None, :])
           + b * GG)
    return R, dR, d2R


def tangent_basis(t0) -> np.ndarray:
    """Deterministic orthonormal basis ``(3, 2)`` of the plane orthogonal to ``t0``."""
    t0 = np.asarray(t0, dtype=float)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(t0)))] = 1.0
    b1 = np.cross(t0, axis)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(t0, b1)
    return np.column_stack([b1, b2])


def _sphere_derivatives(s, t0, B):
    s = np.asarray(s, dtype=float)
    a, a1, a2, _, _, _ = _ab(float(s @ s))
    c1, c2 = -0.5 * a, -0.5 * a1
    c = np.cos(np.sqrt(float(s @ s)))
    u = B @ s
    t = c * t0 + a * u
    dt = (2 * c1 * s[:, None] * t0 + 2 * a1 * s[:, None] * u + a * B.T)
    ss = np.outer(s, s)
    I2 = np.eye(2)
    d2t = ((4 * c2 * ss + 2 * c1 * I2)[:, :, None] * t0
           + (4 * a2 * ss + 2 * a1 * I2)[:, :, None] * u
           + 2 * a1 * (s[None, :, None] * B.T[:, None, :] + s[:, None, None] * B.T[None, :, :]))
    return t, dt, d2t


@dataclass(frozen=True)
class EssentialParams:
    """5-vector ``theta`` in the chart centred on the base pose ``(R0, t0)``."""

    theta: np.ndarray
    R0: np.ndarray = field(default_factory=lambda: np.eye(3))
    t0: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(5)
        R0 = np.array(self.R0, dtype=float).reshape(3, 3)
        t0 = np.array(self.t0, dtype=float).reshape(3)
        t0 = t0 / np.linalg.norm(t0)
        for arr in (theta, R0, t0):
            arr.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "R0", R0)
        object.__setattr__(self, "t0", t0)

    @classmethod
    def at_pose(cls, R, t) -> "EssentialParams":
        """Chart centred on ``(R, t)``; ``theta`` is zero."""
        return cls(np.zeros(5), R, t)

    @property
    def basis(self) -> np.ndarray:
        return tangent_basis(self.t0)

    def rotation(self) -> np.ndarray:
        return so3_exp(self.theta[:3]) @ self.R0

    def translation(self) -> np.ndarray:
        t, _, _ = _sphere_derivatives(self.theta[3:], self.t0, self.basis)
        return t / np.linalg.norm(t)

    def pose(self):
        return self.rotation(), self.translation()

    def essential(self) -> np.ndarray:
        return essential_from_params(self)

    def rebased(self) -> "EssentialParams":
        """Same pose, chart re-centred on it."""
        return EssentialParams.at_pose(*self.pose())

    def with_theta(self, theta) -> "EssentialParams":
        return EssentialParams(theta, self.R0, self.t0)


def essential_from_pose(R, t) -> np.ndarray:
    return skew(t) @ np.asarray(R, dtype=float)


def essential_from_params(params: EssentialParams) -> np.ndarray:
    R, t = params.pose()
    return essential_from_pose(R, t)


def essential_derivatives(params: EssentialParams):
    """E(theta) and its analytic derivatives.

    Returns ``E (3,3)``, ``dE (5,3,3)`` and ``d2E (5,5,3,3)`` where
    ``dE[k] = dE/dtheta_k`` and ``d2E[j, k] = d^2E/dtheta_j dtheta_k``.
    """
    th = params.theta
    Rw, dRw, d2Rw = _so3_derivatives(th[:3])
    t, dt, d2t = _sphere_derivatives(th[3:], params.t0, params.basis)
    R0 = params.R0
    R = Rw @ R0
    dR = dRw @ R0
    d2R = d2Rw @ R0
    T = skew(t)
    dT = np.stack([skew(v) for v in dt])
    d2T = np.stack([[skew(d2t[j, k]) for k in range(2)] for j in range(2)])

    E = T @ R
    dE = np.empty((5, 3, 3))
    dE[:3] = T @ dR
    dE[3:] = dT @ R
    d2E = np.empty((5, 5, 3, 3))
    d2E[:3, :3] = T @ d2R
    cross = np.einsum("kab,jbc->jkac", dT, dR)  # d/dw_j d/ds_k
    d2E[:3, 3:] = cross
    d2E[3:, :3] = cross.transpose(1, 0, 2, 3)
    d2E[3:, 3:] = d2T @ R
    return E, dE, d2E


def params_from_pose(R, t, base=None) -> EssentialParams:
    """Coordinates of pose ``(R, t)`` in the chart centred on ``base = (R0, t0)``."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    nt = np.linalg.norm(t)
    if not np.isfinite(nt) or nt == 0:
        raise InputError("translation must be a non-zero finite vector")
    t = t / nt
    if base is None:
        R0, t0 = np.eye(3), np.array([0.0, 0.0, 1.0])
    else:
        R0, t0 = (np.asarray(b, dtype=float) for b in base)
        t0 = t0 / np.linalg.norm(t0)
    w = so3_log(R @ R0.T)
    B = tangent_basis(t0)
    proj = B.T @ t
    sin_r = np.linalg.norm(proj)
    cos_r = float(t @ t0)
    r = np.arctan2(sin_r, cos_r)
    if np.pi - r < 1e-6:
        raise ChartSingularity("translation is antipodal to the chart base direction")
    s = proj * (r / sin_r) if sin_r > 0 else np.zeros(2)
    return EssentialParams(np.concatenate([w, s]), R0, t0)


def epipolar_residual(x, x2, E) -> float:
    """Algebraic residual ``x2^T E x`` of one correspondence."""
    return float(np.asarray(x2, dtype=float) @ np.asarray(E, dtype=float) @ np.asarray(x, dtype=float))


def epipolar_residuals(x1, x2, E) -> np.ndarray:
    return np.einsum("ni,ij,nj->n", x2, E, x1)


def canonical_essential(E) -> np.ndarray:
    """Scale to ``||E||_F = sqrt(2)`` and make the largest-magnitude entry positive."""
    E = np.asarray(E, dtype=float)
    E = E * (SQRT2 / np.linalg.norm(E))
    flat = E.ravel()
    if flat[int(np.argmax(np.abs(flat)))] < 0:
        E = -E
    return E


def essential_distance(E1, E2) -> float:
    return float(np.linalg.norm(canonical_essential(E1) - canonical_essential(E2)))


def essential_constraint_residuals(E):
    """``(|det E|, ||2 E E^T E - tr(E E^T) E||_F)`` after scaling to ``||E||_F = sqrt(2)``."""
    E = np.asarray(E, dtype=float)
    E = E * (SQRT2 / np.linalg.norm(E))
    EEt = E @ E.T
    return abs(np.linalg.det(E)), float(np.linalg.norm(2 * EEt @ E - np.trace(EEt) * E))


def is_essential(E, tol=1e-9) -> bool:
    d, c = essential_constraint_residuals(E)
    return d <= tol and c <= tol


@dataclass(frozen=True)
class FlowField:
    """Dense forward flow over a ``height x width`` grid, row-major, in pixels.

    ``uv[r, c] = (du, dv)`` is the displacement of pixel ``(u=c, v=r)``.
    """

    uv: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=float)
        if uv.ndim != 3 or uv.shape[2] != 2:
            raise InputError(f"flow must have shape (H, W, 2), got {uv.shape}")
        valid = None if self.valid is None else np.asarray(self.valid, dtype=bool)
        if valid is not None and valid.shape != uv.shape[:2]:
            raise InputError("validity mask does not match the flow grid")
        check = uv if valid is None else uv[valid]
        if not np.all(np.isfinite(check)):
            raise InputError("flow contains non-finite values")
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.uv.shape[0]

    @property
    def width(self) -> int:
        return self.uv.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.uv.shape[:2], dtype=bool)
        return self.valid

    def pixel_grid(self) -> np.ndarray:
        """Pixel coordinates ``(H*W, 2)`` in row-major order."""
        vv, uu = np.mgrid[0:self.height, 0:self.width]
        return np.column_stack([uu.ravel(), vv.ravel()]).astype(float)


@dataclass(frozen=True)
class NormalizedCorrespondenceSet:
    """Paired normalized points ``x1[i] <-> x2[i]``.

    ``K2_inv`` is the inverse second-camera intrinsics: the second point moves
    with the flow as ``x2 = K2_inv (p + v, 1)``, so ``dx2/dv = K2_inv[:, :2]``.
    ``indices`` point back into the source grid or table.
    """

    x1: np.ndarray
    x2: np.ndarray
    indices: np.ndarray | None = None
    K2_inv: np.ndarray | None = None

    def __post_init__(self):
        x1 = np.atleast_2d(np.asarray(self.x1, dtype=float))
        x2 = np.atleast_2d(np.asarray(self.x2, dtype=float))
        if x1.shape != x2.shape or x1.shape[1] != 3:
            raise InputError(f"correspondence arrays must both be (N, 3), got {x1.shape} and {x2.shape}")
        if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
            raise InputError("correspondences contain non-finite values")
        idx = np.arange(len(x1)) if self.indices is None else np.asarray(self.indices, dtype=int)
        K2_inv = np.eye(3) if self.K2_inv is None else np.asarray(self.K2_inv, dtype=float)
        for arr in (x1, x2, idx, K2_inv):
            arr.setflags(write=False)
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "K2_inv", K2_inv)

    def __len__(self):
        return len(self.x1)

    @property
    def flow_jacobian(self) -> np.ndarray:
        """``dx2/dv`` as a ``(3, 2)`` matrix."""
        return self.K2_inv[:, :2]

    @classmethod
    def from_pixels(cls, p1, p2, K1: CameraIntrinsics, K2: CameraIntrinsics | None = None, indices=None):
        K2 = K1 if K2 is None else K2
        return cls(normalize_points(p1, K1), normalize_points(p2, K2), indices, K2.inverse)

    @classmethod
    def from_flow(cls, flow: FlowField, K1: CameraIntrinsics, K2: CameraIntrinsics | None = None):
        """Every valid pixel of ``flow``; indices are row-major grid positions."""
        grid = flow.pixel_grid()
        mask = flow.valid_mask.ravel()
        idx = np.flatnonzero(mask)
        p1 = grid[idx]
        p2 = p1 + flow.uv.reshape(-1, 2)[idx]
        return cls.from_pixels(p1, p2, K1, K2, idx)

    def subset(self, selector) -> "NormalizedCorrespondenceSet":
        return NormalizedCorrespondenceSet(self.x1[selector], self.x2[selector],
                                           self.indices[selector], self.K2_inv)

    def with_flow_offset(self, i: int, component: int, h: float) -> "NormalizedCorrespondenceSet":
        """Copy with flow entry ``(i, component)`` shifted by ``h`` pixels."""
        x2 = self.x2.copy()
        x2[i] += self.K2_inv[:, component] * h
        return NormalizedCorrespondenceSet(self.x1, x2, self.indices, self.K2_inv)


def residual_derivatives(corr: NormalizedCorrespondenceSet, params: EssentialParams, second: bool = False):
    """Residuals ``z_i = x2_i^T E(theta) x1_i`` with ``dz/dtheta (N, 5)``.

    With ``second=True`` also returns ``d2z/dtheta2 (N, 5, 5)``.
    """
    E, dE, d2E = essential_derivatives(params)
    Ex = corr.x1 @ E.T
    z = np.einsum("ni,ni->n", corr.x2, Ex)
    dEx = np.einsum("kij,nj->nki", dE, corr.x1)
    dz = np.einsum("ni,nki->nk", corr.x2, dEx)
    if not second:
        return z, dz
    d2z = np.einsum("na,jkab,nb->njk", corr.x2, d2E, corr.x1, optimize=True)
    return z, dz, d2z
