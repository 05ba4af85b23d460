"""Deterministic synthetic two-view scenes.

The scene is a textured corridor (ground, two side walls, back wall) with an
optional fronto-parallel occluding panel. Every surface is planar, so depth in
either view is an exact ray cast: forward and backward flow, the two images
and the depth-test occlusion mask all come from closed-form geometry.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, DegenerateScene
from .geometry import (CameraIntrinsics, EssentialParams, FlowField, NormalizedCorrespondenceSet,
                       essential_from_pose, so3_exp)

# named RNG streams
_POSE, _POINTS, _NOISE, _OUTLIERS, _TEXTURE = range(5)
_MODES = ("forward", "lateral", "uniform")


def _rng(seed, stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


@dataclass(frozen=True)
class SceneConfig:
    width: int = 640
    height: int = 192
    fx: float = 720.0
    fy: float = 720.0
    cx: float | None = None
    cy: float | None = None
    fx2: float | None = None
    fy2: float | None = None
    cx2: float | None = None
    cy2: float | None = None
    rotation_min: float = 0.005
    rotation_max: float = 0.03
    translation_mode: str = "forward"
    translation_jitter: float = 0.15
    baseline: float = 1.0
    depth_min: float = 5.0
    depth_max: float = 60.0
    num_points: int = 2000
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_min: float = 20.0
    outlier_max: float = 200.0
    occluder: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.width < 4 or self.height < 4:
            raise ConfigError("image must be at least 4x4")
        if not 0 < self.depth_min < self.depth_max:
            raise ConfigError("depth range must satisfy 0 < depth_min < depth_max")
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigError("outlier_fraction must be in [0, 1)")
        if self.noise_sigma < 0 or self.baseline < 0:
            raise ConfigError("noise_sigma and baseline must be non-negative")
        if not 0 <= self.rotation_min <= self.rotation_max:
            raise ConfigError("rotation range must satisfy 0 <= min <= max")
        if self.translation_mode not in _MODES:
            raise ConfigError(f"translation_mode must be one of {_MODES}")
        if self.num_points < 1:
            raise ConfigError("num_points must be positive")
        if not 0 <= self.outlier_min <= self.outlier_max:
            raise ConfigError("outlier displacement range must satisfy 0 <= min <= max")

    @property
    def K1(self) -> CameraIntrinsics:
        cx = (self.width - 1) / 2 if self.cx is None else self.cx
        cy = (self.height - 1) / 2 if self.cy is None else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy)

    @property
    def K2(self) -> CameraIntrinsics:
        K1 = self.K1
        pick = lambda v, d: d if v is None else v  # noqa: E731
        return CameraIntrinsics(pick(self.fx2, K1.fx), pick(self.fy2, K1.fy),
                                pick(self.cx2, K1.cx), pick(self.cy2, K1.cy))

    @classmethod
    def from_mapping(cls, values: dict) -> "SceneConfig":
        """Build from string values (a parsed key=value file); unknown keys raise."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown scene config key: {key}")
            kwargs[key] = _coerce(key, types[key], raw)
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    typ = str(typ)
    try:
        if raw.lower() == "none" and "None" in typ:
            return None
        if typ.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


@dataclass(frozen=True)
class _Plane:
    normal: np.ndarray
    offset: float
    axes: tuple  # two coordinate indices used for texturing
    bounds: tuple | None = None  # ((lo, hi), (lo, hi)) on the texture axes


def _corridor(cfg: SceneConfig, K1: CameraIntrinsics):
    near, far = cfg.depth_min, cfg.depth_max
    half_w = max(K1.cx, cfg.width - 1 - K1.cx) / K1.fx
    half_h = (cfg.height - 1 - K1.cy) / K1.fy
    planes = [
        _Plane(np.array([0.0, 1.0, 0.0]), near * half_h, (0, 2)),   # ground, y down
        _Plane(np.array([-1.0, 0.0, 0.0]), near * half_w, (1, 2)),  # left wall
        _Plane(np.array([1.0, 0.0, 0.0]), near * half_w, (1, 2)),   # right wall
        _Plane(np.array([0.0, 0.0, 1.0]), far, (0, 1)),             # back wall
    ]
    if cfg.occluder:
        z = 2.0 * near
        w = z * half_w
        h = z * half_h
        planes.append(_Plane(np.array([0.0, 0.0, 1.0]), z, (0, 1),
                             ((-0.6 * w, -0.05 * w), (-0.8 * h, 0.5 * h))))
    return planes


def _cast(planes, origin, dirs):
    """Nearest hit distance along ``dirs`` (rows, not normalised) and surface index."""
    n = len(dirs)
    best = np.full(n, np.inf)
    which = np.full(n, -1)
    for k, pl in enumerate(planes):
        denom = dirs @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (pl.offset - origin @ pl.normal) / denom
        hit = np.isfinite(lam) & (lam > 1e-9)
        if pl.bounds is not None:
            X = origin + lam[:, None] * dirs
            for ax, (lo, hi) in zip(pl.axes, pl.bounds):
                hit &= (X[:, ax] >= lo) & (X[:, ax] <= hi)
        closer = hit & (lam < best)
        best[closer] = lam[closer]
        which[closer] = k
    return best, which


def _texture(planes, X, which, rng_params):
    img = np.zeros((len(X), 3))
    for k, pl in enumerate(planes):
        sel = which == k
        if not sel.any():
            continue
        a, b = X[sel][:, pl.axes[0]], X[sel][:, pl.axes[1]]
        freqs, phases, amps = rng_params[k]
        val = 0.5 + np.zeros((sel.sum(), 3))
        for f, ph, am in zip(freqs, phases, amps):
            val += am * np.sin((f[0] * a + f[1] * b)[:, None] + ph)
        img[sel] = np.clip(val, 0.0, 1.0)
    return img


@dataclass
class SyntheticScene:
    config: SceneConfig
    K1: CameraIntrinsics
    K2: CameraIntrinsics
    R: np.ndarray
    t: np.ndarray  # unit direction
    scale: float
    points: np.ndarray  # (H, W, 3) first-view 3D points
    depth1: np.ndarray
    depth2: np.ndarray  # second-view depth map
    flow: FlowField  # noise-free forward flow
    flow_noisy: FlowField
    flow_backward: FlowField
    inlier_labels: np.ndarray  # (H, W), False where the flow was replaced by an outlier
    non_occluded: np.ndarray  # (H, W) depth-test visibility of each first-view pixel
    image1: np.ndarray
    image2: np.ndarray
    sample_indices: np.ndarray  # row-major pixel indices used as correspondences
    extra: dict = field(default_factory=dict)

    @property
    def E(self) -> np.ndarray:
        return essential_from_pose(self.R, self.t)

    @property
    def params(self) -> EssentialParams:
        return EssentialParams.at_pose(self.R, self.t)

    def correspondences(self, noisy: bool = True, indices=None) -> NormalizedCorrespondenceSet:
        flow = self.flow_noisy if noisy else self.flow
        idx = self.sample_indices if indices is None else np.asarray(indices)
        grid = flow.pixel_grid()
        p1 = grid[idx]
        p2 = p1 + flow.uv.reshape(-1, 2)[idx]
        return NormalizedCorrespondenceSet.from_pixels(p1, p2, self.K1, self.K2, idx)

    def sample_labels(self) -> np.ndarray:
        return self.inlier_labels.ravel()[self.sample_indices]


def _sample_pose(cfg: SceneConfig):
    rng = _rng(cfg.rng_seed, _POSE)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(cfg.rotation_min, cfg.rotation_max)
    R = so3_exp(axis * angle)
    if cfg.translation_mode == "uniform":
        m = rng.normal(size=3)
    else:
        base = np.array([0.0, 0.0, 1.0]) if cfg.translation_mode == "forward" else np.array([1.0, 0.0, 0.0])
        m = base + cfg.translation_jitter * rng.normal(size=3)
    m /= np.linalg.norm(m)
    # camera centre moves by baseline * m; X2 = R (X - C2)
    t = -R @ (m * cfg.baseline)
    return R, t


def flow_from_pose_depth(depth, R, t, K1: CameraIntrinsics, K2: CameraIntrinsics | None = None) -> FlowField:
    """Rigid flow of every pixel with known depth.

    ``depth`` is ``(H, W)``; ``t`` carries the metric scale (``X2 = R X + t``).
    Pixels without positive finite depth, or that land behind the second
    camera, are marked invalid.
    """
    K2 = K1 if K2 is None else K2
    depth = np.asarray(depth, dtype=float)
    H, W = depth.shape
    vv, uu = np.mgrid[0:H, 0:W]
    pix = np.column_stack([uu.ravel(), vv.ravel()]).astype(float)
    d = depth.ravel()
    ok = np.isfinite(d) & (d > 0)
    rays = (np.column_stack([pix, np.ones(len(pix))]) @ K1.inverse.T)
    X = rays * np.where(ok, d, 1.0)[:, None]
    X2 = X @ np.asarray(R, dtype=float).T + np.asarray(t, dtype=float)
    ok &= X2[:, 2] > 0
    proj = X2 @ K2.matrix.T
    with np.errstate(divide="ignore", invalid="ignore"):
        p2 = proj[:, :2] / proj[:, 2:3]
    uv = np.where(ok[:, None], p2 - pix, 0.0)
    return FlowField(uv.reshape(H, W, 2), ok.reshape(H, W))


def generate_scene(cfg: SceneConfig | None = None) -> SyntheticScene:
    """Sample a pose, render both views and derive flow, labels and occlusion."""
    cfg = cfg or SceneConfig()
    if cfg.baseline == 0:
        raise DegenerateScene("zero baseline: the essential matrix is undefined")
    K1, K2 = cfg.K1, cfg.K2
    H, W = cfg.height, cfg.width
    R, t_scaled = _sample_pose(cfg)
    planes = _corridor(cfg, K1)
    C2 = -R.T @ t_scaled

    vv, uu = np.mgrid[0:H, 0:W]
    pix = np.column_stack([uu.ravel(), vv.ravel()]).astype(float)
    ones = np.ones((len(pix), 1))
    rays1 = np.hstack([pix, ones]) @ K1.inverse.T
    lam1, which1 = _cast(planes, np.zeros(3), rays1)
    X = rays1 * lam1[:, None]
    depth1 = X[:, 2]

    rays2 = (np.hstack([pix, ones]) @ K2.inverse.T) @ R  # R^T d per row
    lam2, which2 = _cast(planes, C2, rays2)
    depth2 = lam2  # third component of R^T d rotated back is exactly 1

    flow = flow_from_pose_depth(depth1.reshape(H, W), R, t_scaled, K1, K2)
    Xb = C2 + rays2 * lam2[:, None]
    projb = Xb @ K1.matrix.T
    ok_b = np.isfinite(lam2) & (Xb[:, 2] > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        pb = projb[:, :2] / projb[:, 2:3]
    flow_b = FlowField(np.where(ok_b[:, None], pb - pix, 0.0).reshape(H, W, 2), ok_b.reshape(H, W))

    # depth test: the surface seen by camera 2 at p' must be this point
    p2 = pix + flow.uv.reshape(-1, 2)
    X2 = X @ R.T + t_scaled
    in_frame = (flow.valid_mask.ravel() & (p2[:, 0] >= 0) & (p2[:, 0] <= W - 1)
                & (p2[:, 1] >= 0) & (p2[:, 1] <= H - 1))
    ray_p2 = (np.hstack([p2, ones]) @ K2.inverse.T) @ R
    lam_p2, _ = _cast(planes, C2, ray_p2)
    visible = in_frame & (np.abs(lam_p2 - X2[:, 2]) <= 1e-6 * X2[:, 2])

    tex_rng = _rng(cfg.rng_seed, _TEXTURE)
    tex = [(tex_rng.uniform(1.0, 6.0, size=(4, 2)) * tex_rng.choice([-1, 1], size=(4, 2)),
            tex_rng.uniform(0, 2 * np.pi, size=(4, 3)), tex_rng.uniform(0.05, 0.12, size=(4, 3)))
           for _ in planes]
    img1 = _texture(planes, X, which1, tex).reshape(H, W, 3)
    img2 = _texture(planes, Xb, which2, tex).reshape(H, W, 3)

    # correspondences come from pixels whose match lies inside the second image
    candidates = np.flatnonzero(in_frame)
    if candidates.size < 5:
        raise DegenerateScene(f"only {candidates.size} pixels are visible in both views")
    pts_rng = _rng(cfg.rng_seed, _POINTS)
    sample = np.sort(pts_rng.choice(candidates, min(cfg.num_points, candidates.size), replace=False))

    noise_rng = _rng(cfg.rng_seed, _NOISE)
    noise = noise_rng.normal(scale=cfg.noise_sigma, size=(H * W, 2)) if cfg.noise_sigma > 0 else 0.0
    out_rng = _rng(cfg.rng_seed, _OUTLIERS)
    is_out = out_rng.random(H * W) < cfg.outlier_fraction
    mag = out_rng.uniform(cfg.outlier_min, cfg.outlier_max, H * W)
    ang = out_rng.uniform(0, 2 * np.pi, H * W)
    jump = np.column_stack([mag * np.cos(ang), mag * np.sin(ang)])
    uv = flow.uv.reshape(-1, 2)
    noisy = uv + noise
    noisy = np.where(is_out[:, None], uv + jump, noisy)
    noisy = np.where(flow.valid_mask.ravel()[:, None], noisy, 0.0)

    scale = float(np.linalg.norm(t_scaled))
    return SyntheticScene(
        config=cfg, K1=K1, K2=K2, R=R, t=t_scaled / scale, scale=scale,
        points=X.reshape(H, W, 3), depth1=depth1.reshape(H, W), depth2=depth2.reshape(H, W),
        flow=flow, flow_noisy=FlowField(noisy.reshape(H, W, 2), flow.valid_mask),
        flow_backward=flow_b, inlier_labels=~is_out.reshape(H, W),
        non_occluded=visible.reshape(H, W), image1=img1, image2=img2, sample_indices=sample,
    )


def with_overrides(cfg: SceneConfig, **kw) -> SceneConfig:
    return replace(cfg, **kw)
