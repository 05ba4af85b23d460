"""Readers and writers for the on-disk formats used by the command line.

* ``.flo``: magic float 202021.25, int32 width and height, then interleaved
  float32 ``(u, v)``, all little-endian. Unknown flow is stored as 1e10.
* correspondence tables: ``u v u' v' [label]`` per line, ``#`` comments.
* intrinsics and configs: ``key = value`` lines.
* trajectories: one pose per line, the 12 row-major entries of ``[R | t]``.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .geometry import CameraIntrinsics, FlowField

FLO_MAGIC = 202021.25
UNKNOWN_FLOW = 1e10
UNKNOWN_THRESH = 1e9


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_keyvalue(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out[k] = v
    return out


def read_keyvalue(path) -> dict:
    return parse_keyvalue(Path(path).read_text())


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    if isinstance(v, (tuple, list, np.ndarray)):
        return " ".join(format_value(x) for x in np.asarray(v, dtype=float).ravel().tolist())
    return str(v)


def format_keyvalue(mapping: dict) -> str:
    return "".join(f"{k} = {format_value(mapping[k])}\n" for k in sorted(mapping))


# --- flow ---------------------------------------------------------------------

def write_flo(path, flow) -> None:
    if isinstance(flow, FlowField):
        uv = np.where(flow.valid_mask[..., None], flow.uv, UNKNOWN_FLOW)
    else:
        uv = np.asarray(flow, dtype=float)
    if uv.ndim != 3 or uv.shape[2] != 2:
        raise InputError(f"flow must be (H, W, 2), got {uv.shape}")
    H, W = uv.shape[:2]
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], "<f4").tobytes())
        fh.write(np.array([W, H], "<i4").tobytes())
        fh.write(uv.astype("<f4").tobytes())


def read_flo(path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise InputError(f"{path}: too short for a flow file")
    if np.frombuffer(data[:4], "<f4")[0] != np.float32(FLO_MAGIC):
        raise InputError(f"{path}: bad flow magic")
    W, H = (int(x) for x in np.frombuffer(data[4:12], "<i4"))
    if W <= 0 or H <= 0:
        raise InputError(f"{path}: invalid dimensions {W}x{H}")
    if len(data) != 12 + 8 * W * H:
        raise InputError(f"{path}: expected {8 * W * H} payload bytes, got {len(data) - 12}")
    uv = np.frombuffer(data[12:], "<f4").reshape(H, W, 2).astype(float)
    valid = np.all(np.isfinite(uv) & (np.abs(uv) < UNKNOWN_THRESH), axis=2)
    return FlowField(np.where(valid[..., None], uv, 0.0), valid)


# --- correspondences ------------------------------------------------------------

def write_correspondences(path, p1, p2, labels=None) -> None:
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    lines = ["# u v u' v'" + (" label" if labels is not None else "")]
    for i in range(len(p1)):
        row = f"{p1[i, 0]:.17g} {p1[i, 1]:.17g} {p2[i, 0]:.17g} {p2[i, 1]:.17g}"
        if labels is not None:
            row += f" {int(labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_correspondences(path):
    """Returns ``(p1, p2, labels)``; ``labels`` is None when the table has none."""
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise InputError(f"{path}:{n}: expected 4 or 5 columns, got {len(parts)}")
        try:
            rows.append([float(x) for x in parts])
        except ValueError:
            raise InputError(f"{path}:{n}: non-numeric entry") from None
    if not rows:
        return np.zeros((0, 2)), np.zeros((0, 2)), None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise InputError(f"{path}: rows mix labelled and unlabelled pairs")
    a = np.array(rows)
    labels = a[:, 4].astype(int) if a.shape[1] == 5 else None
    return a[:, 0:2], a[:, 2:4], labels


# --- intrinsics -------------------------------------------------------------------

_K_KEYS = ("fx", "fy", "cx", "cy", "skew")


def write_intrinsics(path, K1: CameraIntrinsics, K2: CameraIntrinsics | None = None) -> None:
    vals = {}
    for prefix, K in (("cam1.", K1), ("cam2.", K2 if K2 is not None else K1)):
        for k in _K_KEYS:
            vals[prefix + k] = float(getattr(K, k))
    Path(path).write_text(format_keyvalue(vals))


def read_intrinsics(path):
    """``(K1, K2)`` from ``key = value``; unprefixed keys apply to both cameras."""
    raw = read_keyvalue(path)
    cams = {"cam1.": {}, "cam2.": {}}
    for key, val in raw.items():
        prefix, name = ("", key) if "." not in key else (key.split(".", 1)[0] + ".", key.split(".", 1)[1])
        if name not in _K_KEYS or prefix not in ("", "cam1.", "cam2."):
            raise ConfigError(f"unknown intrinsics key: {key}")
        try:
            v = float(val)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {val!r}") from None
        for p in ((prefix,) if prefix else ("cam1.", "cam2.")):
            if prefix or name not in cams[p]:
                cams[p][name] = v
    out = []
    for p in ("cam1.", "cam2."):
        missing = [k for k in _K_KEYS[:4] if k not in cams[p]]
        if missing:
            raise ConfigError(f"intrinsics missing {', '.join(p + m for m in missing)}")
        out.append(CameraIntrinsics(**cams[p]))
    return tuple(out)


# --- trajectories -------------------------------------------------------------------

def write_trajectory(path, poses) -> None:
    P = np.asarray(poses, dtype=float)
    lines = [" ".join(f"{x:.17g}" for x in T[:3, :4].ravel()) for T in P]
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> np.ndarray:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = [float(x) for x in line.split()]
        except ValueError:
            raise InputError(f"{path}:{n}: non-numeric entry") from None
        if len(vals) != 12:
            raise InputError(f"{path}:{n}: expected 12 values, got {len(vals)}")
        rows.append(np.array(vals).reshape(3, 4))
    if not rows:
        raise InputError(f"{path}: no poses")
    return np.stack(rows)


# --- images and masks -----------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """8-bit PNG or PPM as an ``(H, W, 3)`` float array in [0, 1]."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB", "RGBA", "P"):
                raise InputError(f"{path}: unsupported image mode {im.mode}")
            a = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from None
    return a


def write_image(path, img) -> None:
    from PIL import Image

    a = np.asarray(img, dtype=float)
    a8 = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a8).save(path, format="PNG" if str(path).lower().endswith(".png") else "PPM")


def read_mask(path) -> np.ndarray:
    return read_image(path)[..., 0] >= 0.5


def write_mask(path, mask) -> None:
    m = np.asarray(mask, dtype=bool)
    write_image(path, np.repeat(m[..., None], 3, axis=2).astype(float))
