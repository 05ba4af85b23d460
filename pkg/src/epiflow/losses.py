"""Upper-level flow losses: epipolar, census photometric, forward-backward,
edge-aware smoothness, occlusion, and their multi-scale totals.

Images are ``(H, W, 3)`` float arrays with intensities nominally in [0, 1].
Flows are :class:`FlowField` objects or ``(H, W, 2)`` arrays of ``(u, v)``
with ``u`` along columns. All reductions are single-threaded numpy sums, so
results do not depend on the environment's worker count.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from importlib import resources
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, EmptyMask, EpipoleSingularity, InputError
from .fileio import parse_keyvalue
from .geometry import EssentialParams, FlowField, NormalizedCorrespondenceSet, essential_derivatives

LUMA = np.array([0.299, 0.587, 0.114])
EPIPOLE_EPS = 1e-24  # squared epipolar-line normal length treated as zero
PRESETS = ("kitti_baseline", "kitti_teacher", "kitti_student", "rgbd")


@dataclass(frozen=True)
class LossWeights:
    scale_weights: tuple = (1.0, 0.34, 0.31, 0.27, 0.08)
    lambda_p: float = 1.0
    lambda_c: float = 0.1
    lambda_s: float = 0.1
    lambda_e: float = 0.0
    lambda_o: float = 0.0
    charbonnier_eps: float = 1e-3
    charbonnier_gamma: float = 0.45
    smooth_alpha: float = 10.0
    census_window: int = 3
    census_tolerance: float = 0.04
    occ_beta1: float = 0.01
    occ_beta2: float = 0.5
    mode: str = "teacher"

    def __post_init__(self):
        sw = tuple(float(w) for w in self.scale_weights)
        object.__setattr__(self, "scale_weights", sw)
        if len(sw) != 5:
            raise ConfigError(f"scale_weights needs five entries, got {len(sw)}")
        vals = sw + (self.lambda_p, self.lambda_c, self.lambda_s, self.lambda_e, self.lambda_o,
                     self.smooth_alpha, self.census_tolerance, self.occ_beta1, self.occ_beta2)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ConfigError("loss weights and thresholds must be finite and non-negative")
        if not self.charbonnier_eps > 0:
            raise ConfigError("charbonnier_eps must be positive")
        if self.census_window < 3 or self.census_window % 2 == 0:
            raise ConfigError("census_window must be odd and at least 3")
        if self.mode not in ("teacher", "student"):
            raise ConfigError(f"mode must be teacher or student, got {self.mode!r}")

    @classmethod
    def from_mapping(cls, values: dict) -> "LossWeights":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown loss config key: {key}")
            try:
                if key == "scale_weights":
                    kw[key] = tuple(float(x) for x in str(raw).replace(",", " ").split()) \
                        if isinstance(raw, str) else tuple(raw)
                elif key == "mode":
                    kw[key] = str(raw)
                elif key == "census_window":
                    kw[key] = int(raw)
                else:
                    kw[key] = float(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kw)

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_preset(name: str) -> LossWeights:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("epiflow").joinpath("presets", f"{name}.cfg").read_text()
    return LossWeights.from_mapping(parse_keyvalue(text))


# --- primitives -------------------------------------------------------------

def charbonnier(z, eps: float = 1e-3, gamma: float = 0.45) -> float:
    """Mean of ``(z_i^2 + eps^2)^gamma`` over all elements of ``z``."""
    if not eps > 0:
        raise ConfigError("eps must be positive")
    z = np.asarray(z, dtype=float)
    return float(np.mean((z * z + eps * eps) ** gamma))


def _charb_rows(z, eps, gamma):
    # per-pixel charbonnier over the trailing axis
    return np.mean((z * z + eps * eps) ** gamma, axis=-1)


def as_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=float)
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    if a.ndim != 3 or a.shape[2] != 3:
        raise InputError(f"image must be (H, W, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError("image contains non-finite values")
    return a


def _as_flow(V, shape=None):
    if isinstance(V, FlowField):
        uv, valid = V.uv, V.valid_mask
    else:
        uv = np.asarray(V, dtype=float)
        if uv.ndim != 3 or uv.shape[2] != 2:
            raise InputError(f"flow must be (H, W, 2), got {uv.shape}")
        valid = np.ones(uv.shape[:2], bool)
    if shape is not None and uv.shape[:2] != tuple(shape):
        raise InputError(f"flow is {uv.shape[:2]}, expected {tuple(shape)}")
    return uv, valid


@dataclass(frozen=True)
class OcclusionMask:
    """``mask`` is True where the pixel is non-occluded."""

    mask: np.ndarray

    @property
    def Z(self) -> int:
        return int(np.count_nonzero(self.mask))


def _as_mask(M, shape):
    m = M.mask if isinstance(M, OcclusionMask) else np.asarray(M, dtype=bool)
    if m.shape != tuple(shape):
        raise InputError(f"mask is {m.shape}, expected {tuple(shape)}")
    return m


def bilinear_sample(field, coords):
    """Sample ``field (H, W[, C])`` at ``coords (..., 2)`` given as ``(x, y)``.

    Coordinates are clamped to the frame. Returns the samples and a mask of
    coordinates that were inside the frame.
    """
    f = np.asarray(field, dtype=float)
    squeeze = f.ndim == 2
    if squeeze:
        f = f[:, :, None]
    H, W = f.shape[:2]
    x, y = coords[..., 0], coords[..., 1]
    inside = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    x = np.clip(x, 0, W - 1)
    y = np.clip(y, 0, H - 1)
    x0 = np.minimum(np.floor(x).astype(int), W - 2) if W > 1 else np.zeros_like(x, int)
    y0 = np.minimum(np.floor(y).astype(int), H - 2) if H > 1 else np.zeros_like(y, int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = (x - x0)[..., None]
    ay = (y - y0)[..., None]
    out = ((1 - ay) * ((1 - ax) * f[y0, x0] + ax * f[y0, x1])
           + ay * ((1 - ax) * f[y1, x0] + ax * f[y1, x1]))
    return (out[..., 0] if squeeze else out), inside


def _targets(uv):
    H, W = uv.shape[:2]
    vv, uu = np.mgrid[0:H, 0:W]
    return np.stack([uu + uv[..., 0], vv + uv[..., 1]], axis=-1)


# --- census -------------------------------------------------------------------

def census_transform(img, window: int = 3, tolerance: float = 0.04) -> np.ndarray:
    """Ternary census signature ``(H, W, window^2 - 1)`` with values in {-1, 0, 1}.

    Each neighbour of the grayscale image scores +1 when brighter than the
    centre by more than ``tolerance``, -1 when darker by more than it, else 0.
    Borders use clamped sampling.
    """
    if window < 3 or window % 2 == 0:
        raise ConfigError("census window must be odd and at least 3")
    gray = as_image(img) @ LUMA
    H, W = gray.shape
    r = window // 2
    padded = np.pad(gray, r, mode="edge")
    sig = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx == 0 and dy == 0:
                continue
            d = padded[r + dy:r + dy + H, r + dx:r + dx + W] - gray
            sig.append(np.where(d > tolerance, 1.0, np.where(d < -tolerance, -1.0, 0.0)))
    return np.stack(sig, axis=-1)


# --- masks and losses ---------------------------------------------------------

def occlusion_mask(Vf, Vb, beta1: float = 0.01, beta2: float = 0.5) -> OcclusionMask:
    """Forward-backward consistency test.

    A pixel is occluded when
    ``|Vf(p) + Vb(p + v)|^2 > beta1 (|Vf(p)|^2 + |Vb(p + v)|^2) + beta2``,
    when ``p + v`` leaves the frame, or when its forward flow is invalid.
    """
    uvf, validf = _as_flow(Vf)
    uvb, _ = _as_flow(Vb, uvf.shape[:2])
    back, inside = bilinear_sample(uvb, _targets(uvf))
    res = np.sum((uvf + back) ** 2, axis=-1)
    bound = beta1 * (np.sum(uvf ** 2, axis=-1) + np.sum(back ** 2, axis=-1)) + beta2
    return OcclusionMask(inside & validf & ~(res > bound))


def _masked_mean(values, m, what):
    Z = int(np.count_nonzero(m))
    if Z == 0:
        raise EmptyMask(f"{what}: mask selects no pixels")
    return float(np.sum(values[m]) / Z)


def photometric_loss(I, I2, Vf, M, cfg: LossWeights = LossWeights()) -> float:
    """Masked mean Charbonnier of census differences between ``I`` and warped ``I2``."""
    I, I2 = as_image(I), as_image(I2)
    if I.shape != I2.shape:
        raise InputError("image shapes differ")
    uv, _ = _as_flow(Vf, I.shape[:2])
    m = _as_mask(M, I.shape[:2])
    c1 = census_transform(I, cfg.census_window, cfg.census_tolerance)
    c2 = census_transform(I2, cfg.census_window, cfg.census_tolerance)
    warped, _ = bilinear_sample(c2, _targets(uv))
    per_px = _charb_rows(c1 - warped, cfg.charbonnier_eps, cfg.charbonnier_gamma)
    return _masked_mean(per_px, m, "photometric loss")


def fb_consistency_loss(Vf, Vb, M, cfg: LossWeights = LossWeights()) -> float:
    uvf, _ = _as_flow(Vf)
    uvb, _ = _as_flow(Vb, uvf.shape[:2])
    m = _as_mask(M, uvf.shape[:2])
    back, _ = bilinear_sample(uvb, _targets(uvf))
    per_px = _charb_rows(uvf + back, cfg.charbonnier_eps, cfg.charbonnier_gamma)
    return _masked_mean(per_px, m, "consistency loss")


def smoothness_loss(I, V, alpha: float = 10.0) -> float:
    """Edge-aware first-order smoothness with forward differences.

    The last column (for ``u``) and last row (for ``v``) have no forward
    neighbour and contribute zero; the sum is divided by ``2 N``.
    """
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    I = as_image(I)
    uv, _ = _as_flow(V, I.shape[:2])
    N = I.shape[0] * I.shape[1]
    total = 0.0
    for axis in (1, 0):  # u (columns) then v (rows)
        dI = np.sum(np.abs(np.diff(I, axis=axis)), axis=-1)
        dV = np.sum(np.abs(np.diff(uv, axis=axis)), axis=-1)
        total += float(np.sum(np.exp(-alpha / 3.0 * dI) * dV))
    return total / (2 * N)


def occlusion_loss(V, V_teacher, O, cfg: LossWeights = LossWeights()) -> float:
    uv, _ = _as_flow(V)
    ut, _ = _as_flow(V_teacher, uv.shape[:2])
    m = _as_mask(O, uv.shape[:2])
    per_px = _charb_rows(uv - ut, cfg.charbonnier_eps, cfg.charbonnier_gamma)
    return _masked_mean(per_px, m, "occlusion loss")


class EpipolarLoss(NamedTuple):
    value: float
    d_x2: np.ndarray  # (N, 3)
    d_theta: np.ndarray  # (5,)

    def d_flow(self, corr: NormalizedCorrespondenceSet) -> np.ndarray:
        """Gradient with respect to the flow, ordered ``(u_0, v_0, u_1, ...)``."""
        return (self.d_x2 @ corr.flow_jacobian).ravel()


def epipolar_loss(corr: NormalizedCorrespondenceSet, params: EssentialParams) -> EpipolarLoss:
    """Sum of squared distances from each ``x2`` to its epipolar line ``E x1``.

    ``L = sum z_i^2 / q_i`` with ``z_i = x2_i^T E x1_i`` and
    ``q_i = (E x1_i)_1^2 + (E x1_i)_2^2``.
    """
    E, dE, _ = essential_derivatives(params)
    l = corr.x1 @ E.T  # epipolar lines
    q = l[:, 0] ** 2 + l[:, 1] ** 2
    bad = np.flatnonzero(q <= EPIPOLE_EPS)
    if bad.size:
        raise EpipoleSingularity(bad)
    z = np.einsum("ni,ni->n", corr.x2, l)
    value = float(np.sum(z * z / q))
    d_x2 = (2 * z / q)[:, None] * l
    dl = np.einsum("kij,nj->nki", dE, corr.x1)  # (N, 5, 3)
    dz = np.einsum("ni,nki->nk", corr.x2, dl)
    dq = 2 * (l[:, None, 0] * dl[:, :, 0] + l[:, None, 1] * dl[:, :, 1])
    d_theta = np.sum((2 * z[:, None] * dz * q[:, None] - (z * z)[:, None] * dq) / (q * q)[:, None], axis=0)
    return EpipolarLoss(value, d_x2, d_theta)


def point_line_distances(corr: NormalizedCorrespondenceSet, E) -> np.ndarray:
    """Euclidean distance of each dehomogenised ``x2`` to the line ``E x1``."""
    l = corr.x1 @ np.asarray(E, dtype=float).T
    p = corr.x2[:, :2] / corr.x2[:, 2:3]
    return np.abs(l[:, 0] * p[:, 0] + l[:, 1] * p[:, 1] + l[:, 2]) / np.hypot(l[:, 0], l[:, 1])


# --- multi-scale ----------------------------------------------------------------

def downsample(a) -> np.ndarray:
    """2x2 box average; a trailing odd row or column is dropped."""
    a = np.asarray(a, dtype=float)
    H, W = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
    if H == 0 or W == 0:
        raise InputError("image too small to downsample")
    a = a[:H, :W]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def pyramid(img, flows=(), levels: int = 5):
    """Five-level pyramids of an image and flows (flows are halved per level)."""
    imgs = [np.asarray(img, dtype=float)]
    fl = [[np.asarray(_as_flow(f)[0])] for f in flows]
    for _ in range(levels - 1):
        imgs.append(downsample(imgs[-1]))
        for stack in fl:
            stack.append(0.5 * downsample(stack[-1]))
    return imgs, fl


def compute_terms(I, I2, Vf, Vb, cfg: LossWeights = LossWeights(), corr=None, params=None,
                  V_teacher=None, O=None) -> dict:
    """Per-scale ``p``, ``c``, ``s`` (and ``o``) terms plus a full-resolution ``e``.

    The occlusion mask is recomputed at each scale from that scale's flows.
    ``L_e`` needs ``corr`` and ``params``; ``L_o`` needs ``V_teacher`` and ``O``
    (the latter is box-downsampled and thresholded at 0.5).
    """
    I, I2 = as_image(I), as_image(I2)
    imgs1, (vf, vb) = pyramid(I, (Vf, Vb))
    imgs2, _ = pyramid(I2)
    terms = {"p": [], "c": [], "s": []}
    for k in range(5):
        M = occlusion_mask(vf[k], vb[k], cfg.occ_beta1, cfg.occ_beta2)
        terms["p"].append(photometric_loss(imgs1[k], imgs2[k], vf[k], M, cfg) if M.Z else 0.0)
        terms["c"].append(fb_consistency_loss(vf[k], vb[k], M, cfg) if M.Z else 0.0)
        terms["s"].append(smoothness_loss(imgs1[k], vf[k], cfg.smooth_alpha))
    if V_teacher is not None and O is not None:
        _, (vs, vt) = pyramid(I, (Vf, V_teacher))
        o = [np.asarray(O, dtype=float)]
        for _ in range(4):
            o.append(downsample(o[-1]))
        terms["o"] = [occlusion_loss(vs[k], vt[k], o[k] >= 0.5, cfg) if np.any(o[k] >= 0.5) else 0.0
                      for k in range(5)]
    if corr is not None and params is not None:
        terms["e"] = epipolar_loss(corr, params).value
    return terms


def total_loss(terms: dict, cfg: LossWeights = LossWeights(), mode: str | None = None):
    """Weighted multi-scale total and a per-term breakdown.

    ``terms`` maps ``p``, ``c``, ``s`` (and ``o`` in student mode) to five
    per-scale values and ``e`` to the full-resolution epipolar loss.
    """
    mode = mode or cfg.mode
    if mode not in ("teacher", "student"):
        raise ConfigError(f"mode must be teacher or student, got {mode!r}")
    keys = [("p", cfg.lambda_p), ("c", cfg.lambda_c), ("s", cfg.lambda_s)]
    if mode == "student":
        keys.append(("o", cfg.lambda_o))
    breakdown = {}
    total = 0.0
    for key, lam in keys:
        vals = terms.get(key)
        if vals is None or len(vals) != 5:
            raise ConfigError(f"term {key!r} needs five scales")
        contrib = float(sum(w * lam * float(v) for w, v in zip(cfg.scale_weights, vals)))
        breakdown[key] = contrib
        total += contrib
    e = float(terms.get("e", 0.0))
    breakdown["e"] = cfg.lambda_e * e
    total += breakdown["e"]
    return total, breakdown
