"""Motion segmentation from optical flow.

Pipeline: box-mean smoothing of each flow channel, Sobel edge detection,
morphological closing of the edge mask, 8-connected labeling of the
non-edge pixels, absorption of edge pixels into neighbouring regions, and
an area filter that folds small regions into the static (largest) one.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DomainError, ShapeError
from .flow import FlowField
from .geometry import ImageBuffer

_NEIGHBOURS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class SegmentationConfig:
    kernels: tuple[int, ...] = (3, 5, 9)
    threshold: float = 0.5
    min_area: int = 3000
    closing_radius: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        for k in self.kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"smoothing kernels must be odd and >= 1, got {k}")
        if not self.threshold > 0:
            raise ConfigError(f"edge threshold must be positive, got {self.threshold}")
        if self.min_area < 1:
            raise ConfigError(f"minimum area must be >= 1, got {self.min_area}")
        if self.closing_radius < 0:
            raise ConfigError(f"closing radius must be >= 0, got {self.closing_radius}")


@dataclass(frozen=True, eq=False)
class RegionLabels:
    """Label 0 is the static region, 1..k are motion regions."""

    labels: np.ndarray
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError(f"labels must be 2D, got {labels.shape}")
        if labels.size and labels.min() < 0:
            raise DomainError("labels must be non-negative")
        labels = labels.astype(np.int64)
        counts = np.bincount(labels.ravel(), minlength=1) if labels.size else np.zeros(1, dtype=np.int64)
        if np.any(counts == 0):
            raise DomainError("labels must be contiguous 0..k")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "counts", counts)

    @property
    def k(self) -> int:
        return len(self.counts) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def region(self, region_id: int) -> np.ndarray:
        return self.labels == region_id


def box_filter(a: np.ndarray, size: int) -> np.ndarray:
    """Mean over a size x size window with edge replication, per trailing channel."""
    out = np.asarray(a, dtype=float)
    if size == 1:
        return out.copy()
    for axis in (0, 1):
        out = ndimage.uniform_filter1d(out, size, axis=axis, mode="nearest")
    return out


def smooth_flow(O: FlowField, kernels=(3, 5, 9)) -> FlowField:
    """Sequential box-mean passes over both flow channels; validity unchanged."""
    flow = O.flow
    for k in kernels:
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"smoothing kernels must be odd and >= 1, got {k}")
        flow = box_filter(flow, k)
    return FlowField(flow, O.mask)


def sobel_magnitude(a: np.ndarray) -> np.ndarray:
    """Gradient magnitude per channel of an (H, W, C) array, in value units per pixel.

    The raw 3x3 Sobel response is divided by 8 (the sum of absolute kernel
    weights), so a unit-slope ramp responds with exactly 1.
    """
    p = np.pad(a, ((1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = a.shape[:2]

    def s(dy, dx):
        return p[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]

    gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2 * s(0, -1) + s(1, -1))
    gy = (s(1, -1) + 2 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1))
    return np.sqrt(gx * gx + gy * gy) / 8.0


def edge_map(O: FlowField, threshold: float = 0.5) -> np.ndarray:
    if not threshold > 0:
        raise ConfigError(f"edge threshold must be positive, got {threshold}")
    return sobel_magnitude(O.flow).max(axis=-1) > threshold


def _disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return x * x + y * y <= radius * radius


def close_edges(edges: np.ndarray, radius: int) -> np.ndarray:
    """Morphological closing; the outside of the image counts as background for
    dilation and as foreground for erosion so borders are not eaten away."""
    if radius <= 0:
        return edges.copy()
    se = _disk(radius)
    grown = ndimage.binary_dilation(edges, structure=se, border_value=0)
    return ndimage.binary_erosion(grown, structure=se, border_value=1)


def connected_components(free: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected components of ``free`` by breadth-first traversal.

    Labels are 0..n-1 in row-major order of each component's first pixel;
    pixels outside ``free`` get -1.
    """
    H, W = free.shape
    labels = np.full((H, W), -1, dtype=np.int64)
    flat_free = free.ravel()
    flat = labels.ravel()
    n = 0
    for start in np.flatnonzero(flat_free):
        if flat[start] != -1:
            continue
        flat[start] = n
        queue = deque([start])
        while queue:
            idx = queue.popleft()
            y, x = divmod(idx, W)
            for dy, dx in _NEIGHBOURS_8:
                yy, xx = y + dy, x + dx
                if 0 <= yy < H and 0 <= xx < W:
                    j = yy * W + xx
                    if flat_free[j] and flat[j] == -1:
                        flat[j] = n
                        queue.append(j)
        n += 1
    return labels, n


def _absorb_unlabeled(labels: np.ndarray) -> np.ndarray:
    """Grow labels into -1 pixels, one ring at a time.

    Every unlabeled pixel touching a labeled 8-neighbour takes the label held
    by most such neighbours (ties to the lowest label). All pixels of a ring
    are decided from the previous state, so the result does not depend on
    visiting order.
    """
    labels = labels.copy()
    H, W = labels.shape
    if labels.size == 0 or np.all(labels < 0):
        return np.zeros_like(labels)
    n_labels = int(labels.max()) + 1
    while True:
        unl = labels < 0
        if not unl.any():
            return labels
        padded = np.pad(labels, 1, constant_values=-1)
        neigh = np.stack([padded[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W] for dy, dx in _NEIGHBOURS_8])
        ys, xs = np.nonzero(unl)
        cand = neigh[:, ys, xs]  # (8, M)
        has = (cand >= 0).any(axis=0)
        ys, xs, cand = ys[has], xs[has], cand[:, has]
        counts = np.zeros((len(ys), n_labels), dtype=np.int64)
        rows = np.broadcast_to(np.arange(len(ys)), cand.shape)
        ok = cand >= 0
        np.add.at(counts, (rows[ok], cand[ok]), 1)
        labels[ys, xs] = counts.argmax(axis=1)  # argmax returns the first (lowest) on ties


def _relabel_scan_order(labels: np.ndarray) -> np.ndarray:
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = flat[np.sort(first)]
    lut = np.empty(int(flat.max()) + 1, dtype=np.int64)
    lut[order] = np.arange(len(order))
    return lut[labels]


def label_regions(edges: np.ndarray, closing_radius: int = 2) -> RegionLabels:
    edges = np.asarray(edges, dtype=bool)
    if edges.ndim != 2:
        raise ShapeError(f"edge mask must be 2D, got {edges.shape}")
    closed = close_edges(edges, closing_radius)
    labels, n = connected_components(~closed)
    if n == 0:
        return RegionLabels(np.zeros(edges.shape, dtype=np.int64))
    labels = _absorb_unlabeled(labels)
    return RegionLabels(_relabel_scan_order(labels))


def filter_regions(labels: RegionLabels, min_area: int) -> RegionLabels:
    """Fold regions smaller than ``min_area`` into the static region.

    The static region is the largest one (lowest label on ties) and becomes
    label 0; surviving regions keep their relative order as 1..k.
    """
    if min_area < 1:
        raise ConfigError(f"minimum area must be >= 1, got {min_area}")
    counts = labels.counts
    static = int(np.argmax(counts))
    keep = [i for i in range(len(counts)) if i != static and counts[i] >= min_area]
    lut = np.zeros(len(counts), dtype=np.int64)
    for new, old in enumerate(keep, start=1):
        lut[old] = new
    return RegionLabels(lut[labels.labels])


def fill_invalid(O: FlowField) -> FlowField:
    """Copy the nearest valid vector into invalid pixels (mask unchanged), so
    zero sentinels do not show up as motion edges."""
    if O.mask.all() or not O.mask.any():
        return O
    _, (iy, ix) = ndimage.distance_transform_edt(~O.mask, return_indices=True)
    return FlowField(O.flow[iy, ix], np.ones(O.shape, dtype=bool))


def segment_motion(O: FlowField, cfg: SegmentationConfig | None = None) -> RegionLabels:
    cfg = cfg or SegmentationConfig()
    smoothed = smooth_flow(fill_invalid(O), cfg.kernels)
    edges = edge_map(smoothed, cfg.threshold)
    return filter_regions(label_regions(edges, cfg.closing_radius), cfg.min_area)


def mask_image(I: ImageBuffer, labels: RegionLabels, region_id: int) -> ImageBuffer:
    """Keep only region ``region_id``; everything else is zeroed and invalid."""
    if I.shape != labels.shape:
        raise ShapeError(f"image {I.shape} and labels {labels.shape} differ")
    if not 0 <= region_id <= labels.k:
        raise DomainError(f"region id {region_id} not in 0..{labels.k}")
    region = labels.region(region_id)
    data = np.where(region[..., None], I.data, 0.0)
    return ImageBuffer(data, region & I.valid)
