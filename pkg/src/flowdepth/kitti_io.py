"""KITTI raster codecs (16-bit PNG depth and flow), calibration and pose files,
plus image loading and resizing.

Depth PNG: uint16, depth = value / 256 m, 0 = invalid.
Flow PNG: uint16 RGB, u = (R - 2**15) / 64, v = (G - 2**15) / 64, valid = B != 0.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ConfigError, FormatError, ParseError
from .flow import FlowField
from .geometry import DepthMap, ImageBuffer, Intrinsics, PoseSE3
from .segmentation import RegionLabels

DEPTH_SCALE = 256.0
FLOW_SCALE = 64.0
FLOW_OFFSET = 2**15


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def _read_png(path) -> np.ndarray:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: not a readable PNG")
    return img


def _write_png(path, array: np.ndarray):
    path = os.fspath(path)
    if not cv2.imwrite(path, array, [cv2.IMWRITE_PNG_COMPRESSION, 6]):
        raise OSError(f"could not write {path}")


def read_depth_png(path) -> DepthMap:
    raw = _read_png(path)
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise FormatError(f"{path}: depth PNG must be 16-bit single-channel, got {raw.dtype} {raw.shape}")
    valid = raw > 0
    return DepthMap(np.where(valid, raw / DEPTH_SCALE, 0.0), valid)


def write_depth_png(D: DepthMap, path):
    """Quantize to the 1/256 m grid (round half up); valid depths never encode as 0."""
    stored = _round_half_up(np.where(D.mask, D.depth, 0.0) * DEPTH_SCALE)
    stored = np.where(D.mask, np.clip(stored, 1, 65535), 0)
    _write_png(path, stored.astype(np.uint16))


def read_flow_png(path) -> FlowField:
    raw = _read_png(path)
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise FormatError(f"{path}: flow PNG must be 16-bit 3-channel, got {raw.dtype} {raw.shape}")
    # OpenCV orders channels B, G, R
    valid = raw[..., 0] != 0
    u = (raw[..., 2].astype(float) - FLOW_OFFSET) / FLOW_SCALE
    v = (raw[..., 1].astype(float) - FLOW_OFFSET) / FLOW_SCALE
    flow = np.stack([u, v], axis=-1)
    return FlowField(np.where(valid[..., None], flow, 0.0), valid)


def write_flow_png(O: FlowField, path):
    enc = np.clip(_round_half_up(O.flow * FLOW_SCALE + FLOW_OFFSET), 0, 65535)
    enc[~O.mask] = FLOW_OFFSET
    out = np.zeros(O.shape + (3,), dtype=np.uint16)
    out[..., 2] = enc[..., 0]
    out[..., 1] = enc[..., 1]
    out[..., 0] = O.mask
    _write_png(path, out)


def read_image(path) -> ImageBuffer:
    """8- or 16-bit grayscale/RGB PNG as intensities in [0, 1] (RGB channel order)."""
    raw = _read_png(path)
    if raw.dtype == np.uint8:
        data = raw / 255.0
    elif raw.dtype == np.uint16:
        data = raw / 65535.0
    else:
        raise FormatError(f"{path}: unsupported image depth {raw.dtype}")
    if data.ndim == 3:
        if data.shape[2] == 4:
            data = data[..., :3]
        data = data[..., ::-1]
    return ImageBuffer(np.ascontiguousarray(data))


def write_image(I: ImageBuffer, path, bits: int = 16):
    if bits not in (8, 16):
        raise ConfigError("image bit depth must be 8 or 16")
    top = 255 if bits == 8 else 65535
    data = _round_half_up(I.data * top).astype(np.uint8 if bits == 8 else np.uint16)
    if I.channels == 1:
        data = data[..., 0]
    elif I.channels == 3:
        data = np.ascontiguousarray(data[..., ::-1])
    else:
        raise FormatError("only 1- or 3-channel images can be written")
    _write_png(path, data)


def read_labels_png(path) -> RegionLabels:
    raw = _read_png(path)
    if raw.ndim != 2 or raw.dtype not in (np.uint8, np.uint16):
        raise FormatError(f"{path}: label PNG must be single-channel 8/16-bit")
    return RegionLabels(raw.astype(np.int64))


def write_labels_png(labels: RegionLabels, path):
    if labels.k > 65535:
        raise FormatError("too many regions for a 16-bit label image")
    _write_png(path, labels.labels.astype(np.uint16))


# ----------------------------------------------------------------------------
# calibration and poses


@dataclass(frozen=True)
class CalibrationRecord:
    key: str
    projection: np.ndarray  # 3 x 4
    K: Intrinsics


def _parse_calib(path) -> dict[str, list[float]]:
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or ":" not in line:
                continue
            key, _, rest = line.partition(":")
            try:
                entries[key.strip()] = [float(x) for x in rest.split()]
            except ValueError:
                if key.strip().startswith(("P", "S", "K")):
                    raise ParseError(f"{path}:{lineno}: malformed numbers for {key.strip()!r}") from None
                entries[key.strip()] = None  # non-numeric entries such as calib_time
    return entries


def _size_key(key: str) -> str:
    return "S" + key[1:] if key.startswith("P") else "S_" + key


def read_calibration(path, key: str = "P2", native_size=None, target_size=None) -> CalibrationRecord:
    """Intrinsics from the 3x4 projection matrix stored under ``key``.

    The native image size is taken from ``native_size`` (height, width), from a
    matching ``S...`` entry (``S2`` for ``P2``, ``S_rect_02`` for ``P_rect_02``,
    stored as width height), or else from the principal point as 2 c + 1.
    When ``target_size`` is given the intrinsics are rescaled to it.
    """
    entries = _parse_calib(path)
    if key not in entries:
        raise ParseError(f"{path}: calibration key {key!r} not found")
    vals = entries[key]
    if vals is None or len(vals) != 12:
        raise ParseError(f"{path}: {key!r} must hold 12 numbers")
    P = np.array(vals).reshape(3, 4)
    fx, fy, cx, cy = P[0, 0], P[1, 1], P[0, 2], P[1, 2]
    if not (fx > 0 and fy > 0):
        raise ParseError(f"{path}: {key!r} has non-positive focal lengths")
    if native_size is not None:
        height, width = native_size
    elif entries.get(_size_key(key)) and len(entries[_size_key(key)]) == 2:
        width, height = (int(round(x)) for x in entries[_size_key(key)])
    else:
        width, height = int(round(2 * cx + 1)), int(round(2 * cy + 1))
    K = Intrinsics(fx, fy, cx, cy, int(width), int(height))
    if target_size is not None:
        th, tw = target_size
        if th <= 0 or tw <= 0:
            raise ConfigError("target size must be positive")
        K = K.scaled(tw / K.width, th / K.height, width=tw, height=th)
    return CalibrationRecord(key, P, K)


def write_calibration(K: Intrinsics, path, key: str = "P2"):
    P = [K.fx, 0.0, K.cx, 0.0, 0.0, K.fy, K.cy, 0.0, 0.0, 0.0, 1.0, 0.0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{key}: " + " ".join(repr(float(x)) for x in P) + "\n")
        fh.write(f"{_size_key(key)}: {K.width} {K.height}\n")


def read_poses(path) -> list[PoseSE3]:
    """One pose per line as a row-major 3x4 matrix [R | t]."""
    poses = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                vals = [float(x) for x in line.split()]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed pose") from None
            if len(vals) != 12:
                raise ParseError(f"{path}:{lineno}: a pose needs 12 numbers, got {len(vals)}")
            M = np.eye(4)
            M[:3, :] = np.array(vals).reshape(3, 4)
            R = M[:3, :3]
            if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
                raise ParseError(f"{path}:{lineno}: rotation block is not orthonormal")
            poses.append(PoseSE3.from_matrix(M))
    return poses


def write_poses(poses, path):
    with open(path, "w", encoding="utf-8") as fh:
        for pose in poses:
            fh.write(" ".join(repr(float(x)) for x in pose.as_matrix()[:3, :].ravel()) + "\n")


# ----------------------------------------------------------------------------
# resizing


def _check_target(target):
    h, w = target
    if h <= 0 or w <= 0:
        raise ConfigError(f"target size must be positive, got {target}")
    return int(h), int(w)


def _nearest_index(n_src: int, n_dst: int) -> np.ndarray:
    # pixel-center alignment
    idx = np.floor((np.arange(n_dst) + 0.5) * n_src / n_dst).astype(np.intp)
    return np.clip(idx, 0, n_src - 1)


def resize_image(I: ImageBuffer, target) -> ImageBuffer:
    h, w = _check_target(target)
    if (h, w) == I.shape:
        return ImageBuffer(I.data.copy(), None if I.mask is None else I.mask.copy())
    data = cv2.resize(I.data, (w, h), interpolation=cv2.INTER_LINEAR)
    if data.ndim == 2:
        data = data[..., None]
    mask = None
    if I.mask is not None:
        mask = I.mask[np.ix_(_nearest_index(I.shape[0], h), _nearest_index(I.shape[1], w))]
    return ImageBuffer(np.clip(data, 0.0, 1.0), mask)


def resize_depth(D: DepthMap, target) -> DepthMap:
    """Nearest-neighbour resize; a target pixel is valid only if its source pixel is."""
    h, w = _check_target(target)
    rows, cols = _nearest_index(D.shape[0], h), _nearest_index(D.shape[1], w)
    mask = D.mask[np.ix_(rows, cols)]
    return DepthMap(np.where(mask, D.depth[np.ix_(rows, cols)], 0.0), mask)


def resize_flow(O: FlowField, target) -> FlowField:
    """Nearest-neighbour resize with displacements rescaled by the axis ratios."""
    h, w = _check_target(target)
    H, W = O.shape
    rows, cols = _nearest_index(H, h), _nearest_index(W, w)
    flow = O.flow[np.ix_(rows, cols)] * np.array([w / W, h / H])
    return FlowField(flow, O.mask[np.ix_(rows, cols)])
