"""Optical flow synthesized from depth and pose, region compositing, and the inverse
(depth recovered from flow under a known pose).

Flow is stored as displacement: target coordinates minus source pixel coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, DegenerateParallaxError, DomainError, EmptyDomainError, ShapeError
from .geometry import DepthMap, Intrinsics, PoseSE3, _check_dims, pixel_grid, reproject_coords

PARALLAX_MIN_PX = 0.5


@dataclass(frozen=True, eq=False)
class FlowField:
    flow: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        flow = np.array(self.flow, dtype=float)
        if flow.ndim != 3 or flow.shape[2] != 2:
            raise ShapeError(f"flow must be (H, W, 2), got {flow.shape}")
        finite = np.all(np.isfinite(flow), axis=-1)
        if self.mask is None:
            mask = finite
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != flow.shape[:2]:
                raise ShapeError(f"mask shape {mask.shape} != flow shape {flow.shape[:2]}")
            if np.any(mask & ~finite):
                raise DomainError("valid flow vectors must be finite")
        flow[~mask] = 0.0
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.flow.shape[:2]

    @classmethod
    def constant(cls, height: int, width: int, du: float, dv: float) -> "FlowField":
        flow = np.empty((height, width, 2))
        flow[..., 0] = du
        flow[..., 1] = dv
        return cls(flow, np.ones((height, width), dtype=bool))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A per-pixel real value with a validity mask."""

    values: np.ndarray
    mask: np.ndarray

    @property
    def is_empty(self) -> bool:
        return not bool(self.mask.any())

    def mean(self) -> float:
        if self.is_empty:
            raise EmptyDomainError("no valid pixels to average")
        return float(self.values[self.mask].mean())


def synthesize_flow(D: DepthMap, T: PoseSE3, K: Intrinsics) -> FlowField:
    """Flow induced on the pixels of ``D`` by the rigid motion ``T``."""
    G = reproject_coords(D, T, K)
    flow = G.coords - pixel_grid(*D.shape)
    return FlowField(np.where(G.mask[..., None], flow, 0.0), G.mask)


def composite_flow(parts) -> FlowField:
    """Assemble one flow field from ``(flow, labels, region_id)`` parts.

    Each pixel takes the flow of the single part whose region contains it.
    Pixels claimed by no part are invalid; a pixel claimed twice is an error.
    """
    parts = list(parts)
    if not parts:
        raise DomainError("composite_flow needs at least one part")
    shape = parts[0][0].shape
    flow = np.zeros(shape + (2,))
    valid = np.zeros(shape, dtype=bool)
    claimed = np.zeros(shape, dtype=bool)
    for field, labels, region in parts:
        lab = getattr(labels, "labels", labels)
        if field.shape != shape or lab.shape != shape:
            raise ShapeError("all composite parts must share dimensions")
        region_mask = lab == region
        if np.any(claimed & region_mask):
            raise ConsistencyError(f"region {region} overlaps an already composited region")
        claimed |= region_mask
        flow[region_mask] = field.flow[region_mask]
        valid[region_mask] = field.mask[region_mask]
    return FlowField(flow, valid)


def decompose_flow(O: FlowField, T: PoseSE3, K: Intrinsics, min_parallax: float = PARALLAX_MIN_PX) -> DepthMap:
    """Per-pixel depth that explains flow ``O`` under the known motion ``T``.

    For a pixel with ray r and unknown depth d the moved point is d R r + t. Its
    projection equals the observed target (u', v') iff, in pixel units,

        fx (x' (R r)_z - (R r)_x) d = fx (t_x - x' t_z)
        fy (y' (R r)_z - (R r)_y) d = fy (t_y - y' t_z)

    with x' = (u' - cx) / fx, y' = (v' - cy) / fy. The least-squares solution
    over both rows weights each row by its own coefficient, so an equation the
    translation leaves uninformative (e.g. the v row under purely horizontal
    motion) contributes nothing. Pixels whose translation-induced displacement
    is below ``min_parallax`` pixels are marked invalid.
    """
    _check_dims(O.shape, K, "flow field")
    t = T.translation
    if np.linalg.norm(t) < 1e-12:
        raise DegenerateParallaxError("pose has no translation; depth is unobservable from flow")
    R = T.rotation_matrix
    grid = pixel_grid(*O.shape)
    rays = np.stack(
        [(grid[..., 0] - K.cx) / K.fx, (grid[..., 1] - K.cy) / K.fy, np.ones(O.shape)], axis=-1
    )
    a = rays @ R.T
    target = grid + O.flow
    xp = (target[..., 0] - K.cx) / K.fx
    yp = (target[..., 1] - K.cy) / K.fy
    Au = K.fx * (xp * a[..., 2] - a[..., 0])
    bu = K.fx * (t[0] - xp * t[2])
    Av = K.fy * (yp * a[..., 2] - a[..., 1])
    bv = K.fy * (t[1] - yp * t[2])
    denom = Au * Au + Av * Av
    with np.errstate(invalid="ignore", divide="ignore"):
        d = (Au * bu + Av * bv) / denom
        moved = d[..., None] * a + t
        rot_only = a
        u_full = K.fx * moved[..., 0] / moved[..., 2]
        v_full = K.fy * moved[..., 1] / moved[..., 2]
        u_rot = K.fx * rot_only[..., 0] / rot_only[..., 2]
        v_rot = K.fy * rot_only[..., 1] / rot_only[..., 2]
        parallax = np.hypot(u_full - u_rot, v_full - v_rot)
        valid = (
            O.mask
            & (denom > 0)
            & np.isfinite(d)
            & (d > 0)
            & (moved[..., 2] > 0)
            & (rot_only[..., 2] > 0)
            & (parallax >= min_parallax)
        )
    return DepthMap(np.where(valid, d, 0.0), valid)


def endpoint_error_map(A: FlowField, B: FlowField) -> ScalarField:
    if A.shape != B.shape:
        raise ShapeError(f"flow shapes differ: {A.shape} vs {B.shape}")
    mask = A.mask & B.mask
    diff = A.flow - B.flow
    epe = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    return ScalarField(np.where(mask, epe, 0.0), mask)
