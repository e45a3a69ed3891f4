"""Photometric and flow objectives.

L_pe(I1, I2) = alpha (1 - SSIM) + (1 - 2 alpha) |I1 - I2|, averaged over the
jointly valid pixels; the bilateral loss sums L_pe over both warp directions,
and the multi-region loss sums the bilateral loss over motion regions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, EmptyDomainError, ShapeError
from .flow import FlowField, ScalarField, endpoint_error_map
from .geometry import DepthMap, ImageBuffer, Intrinsics, PoseSE3, warp_image
from .segmentation import RegionLabels, box_filter, mask_image


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.45
    lam: float = 0.1
    ssim_window: int = 3
    c1: float = 0.01**2
    c2: float = 0.03**2
    smooth_l1: bool = False
    smooth_l1_delta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 0.5:
            raise ConfigError(f"alpha must lie in [0, 0.5], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigError(f"SSIM window must be odd, got {self.ssim_window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError("SSIM stabilizers must be positive")
        if self.smooth_l1_delta <= 0:
            raise ConfigError("smooth-L1 transition must be positive")


@dataclass
class LossReport:
    ph_static: float
    ph_motion: list[float]
    ph: float
    flow: float = 0.0
    depth: float = 0.0
    pose: float = 0.0
    optical: float = 0.0
    counts: dict[str, int] = field(default_factory=dict)
    excluded: list[int] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float, int]]:
        rows = [("L_ph_s", self.ph_static, self.counts.get("L_ph_s", 0))]
        for m, v in enumerate(self.ph_motion, start=1):
            rows.append((f"L_ph_m{m}", v, self.counts.get(f"L_ph_m{m}", 0)))
        rows += [
            ("L_ph", self.ph, self.counts.get("L_ph", 0)),
            ("L_flow", self.flow, self.counts.get("L_flow", 0)),
            ("L_depth", self.depth, self.counts.get("L_ph", 0)),
            ("L_pose", self.pose, self.counts.get("L_ph", 0)),
            ("L_optical", self.optical, self.counts.get("L_flow", 0)),
        ]
        return rows

    def to_text(self) -> str:
        lines = [f"{'term':<12}{'value':>16}{'pixels':>10}"]
        lines += [f"{name:<12}{value:>16.9f}{n:>10d}" for name, value, n in self.rows()]
        if self.excluded:
            lines.append("excluded regions (empty overlap): " + ", ".join(map(str, self.excluded)))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = ["term,value,pixels"]
        out += [f"{name},{value!r},{n}" for name, value, n in self.rows()]
        return "\n".join(out) + "\n"


# ----------------------------------------------------------------------------
# SSIM and L_pe


def _ssim_parts(x: np.ndarray, y: np.ndarray, cfg: LossConfig):
    w = cfg.ssim_window
    mx = box_filter(x, w)
    my = box_filter(y, w)
    sxx = box_filter(x * x, w) - mx * mx
    syy = box_filter(y * y, w) - my * my
    sxy = box_filter(x * y, w) - mx * my
    n1 = 2 * mx * my + cfg.c1
    n2 = 2 * sxy + cfg.c2
    d1 = mx * mx + my * my + cfg.c1
    d2 = sxx + syy + cfg.c2
    return (n1 * n2) / (d1 * d2), (mx, my, n1, n2, d1, d2)


def ssim_map(x: np.ndarray, y: np.ndarray, cfg: LossConfig | None = None) -> np.ndarray:
    """Per-pixel, per-channel SSIM of two (H, W, C) arrays (edge-replicated windows)."""
    return _ssim_parts(x, y, cfg or LossConfig())[0]


def window_valid(mask: np.ndarray, window: int) -> np.ndarray:
    """Pixels whose whole (edge-replicated) window lies inside ``mask``."""
    if window == 1:
        return mask.copy()
    return box_filter(mask.astype(float), window) > 1.0 - 1e-9


def ssim(I1: ImageBuffer, I2: ImageBuffer, cfg: LossConfig | None = None) -> ScalarField:
    """Channel-averaged SSIM.

    A pixel reports a value only if every pixel of its window is valid in
    both images, so invalid content never leaks into the statistics.
    """
    cfg = cfg or LossConfig()
    _same_shape(I1, I2)
    s = ssim_map(I1.data, I2.data, cfg).mean(axis=-1)
    mask = window_valid(I1.valid & I2.valid, cfg.ssim_window)
    return ScalarField(np.where(mask, s, 0.0), mask)


def _same_shape(I1: ImageBuffer, I2: ImageBuffer):
    if I1.data.shape != I2.data.shape:
        raise ShapeError(f"image shapes differ: {I1.data.shape} vs {I2.data.shape}")


def _abs_term(diff: np.ndarray, cfg: LossConfig) -> np.ndarray:
    a = np.abs(diff)
    if not cfg.smooth_l1:
        return a
    d = cfg.smooth_l1_delta
    return np.where(a < d, 0.5 * a * a / d, a - 0.5 * d)


def photometric_map(I1: ImageBuffer, I2: ImageBuffer, cfg: LossConfig | None = None) -> ScalarField:
    cfg = cfg or LossConfig()
    _same_shape(I1, I2)
    s = ssim_map(I1.data, I2.data, cfg).mean(axis=-1)
    l1 = _abs_term(I1.data - I2.data, cfg).mean(axis=-1)
    values = cfg.alpha * (1.0 - s) + (1.0 - 2.0 * cfg.alpha) * l1
    mask = window_valid(I1.valid & I2.valid, cfg.ssim_window)
    return ScalarField(np.where(mask, values, 0.0), mask)


def photometric_error(I1: ImageBuffer, I2: ImageBuffer, cfg: LossConfig | None = None) -> float:
    pe = photometric_map(I1, I2, cfg)
    if pe.is_empty:
        raise EmptyDomainError("photometric error needs at least one jointly valid pixel")
    return pe.mean()


def _box_adjoint(g: np.ndarray, size: int) -> np.ndarray:
    """Adjoint of ``box_filter`` (edge replication) over the first two axes.

    Zero-padded correlation spreads each value over its window; the parts that
    fall outside the image are folded back onto the edge pixel they replicate.
    """
    if size == 1:
        return g.copy()
    r = size // 2
    out = g
    for axis in (0, 1):
        n = out.shape[axis]
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        z = ndimage.uniform_filter1d(np.pad(out, pad), size, axis=axis, mode="constant")
        core = np.moveaxis(z, axis, 0)
        folded = core[r : r + n].copy()
        folded[0] += core[:r].sum(axis=0)
        folded[-1] += core[r + n :].sum(axis=0)
        out = np.moveaxis(folded, 0, axis)
    return out


def photometric_error_grad(
    target: np.ndarray, warped: np.ndarray, mask: np.ndarray, cfg: LossConfig
) -> tuple[float, np.ndarray, int]:
    """L_pe(target, warped) and its gradient with respect to ``warped``.

    ``mask`` (H, W) is the joint validity; as in ``photometric_map`` only pixels
    with a fully valid window are averaged. The gradient accounts for the SSIM
    windows reaching into neighbouring pixels.
    """
    mask = window_valid(mask, cfg.ssim_window)
    n = int(mask.sum())
    if n == 0:
        raise EmptyDomainError("photometric error needs at least one jointly valid pixel")
    x, y = target, warped
    C = x.shape[2]
    s, (mx, my, n1, n2, d1, d2) = _ssim_parts(x, y, cfg)
    diff = y - x
    l1 = _abs_term(diff, cfg).mean(axis=-1)
    values = cfg.alpha * (1.0 - s.mean(axis=-1)) + (1.0 - 2.0 * cfg.alpha) * l1
    loss = float(values[mask].mean())

    w = np.where(mask, 1.0 / (n * C), 0.0)[..., None]
    gs = -cfg.alpha * w  # dL/dS per pixel and channel
    ds_dmy = s * (2 * mx / n1 - 2 * mx / n2 - 2 * my / d1 + 2 * my / d2)
    ds_deyy = -s / d2
    ds_dexy = 2 * s / n2
    win = cfg.ssim_window
    grad = (
        _box_adjoint(gs * ds_dmy, win)
        + 2 * y * _box_adjoint(gs * ds_deyy, win)
        + x * _box_adjoint(gs * ds_dexy, win)
    )
    if cfg.smooth_l1:
        d = cfg.smooth_l1_delta
        dl1 = np.where(np.abs(diff) < d, diff / d, np.sign(diff))
    else:
        dl1 = np.sign(diff)
    grad += (1.0 - 2.0 * cfg.alpha) * w * dl1
    return loss, grad, n


# ----------------------------------------------------------------------------
# reprojection losses


def _bilateral_terms(I_t, I_t1, D_t, D_t1, T_fwd, T_bwd, K, cfg):
    """The two directional L_pe maps: frame t+1 synthesized from t, and t from t+1."""
    to_t1 = photometric_map(I_t1, warp_image(I_t, D_t1, T_bwd, K), cfg)
    to_t = photometric_map(I_t, warp_image(I_t1, D_t, T_fwd, K), cfg)
    return to_t1, to_t


def bilateral_reprojection_loss(
    I_t: ImageBuffer,
    I_t1: ImageBuffer,
    D_t: DepthMap,
    D_t1: DepthMap,
    T_fwd: PoseSE3,
    T_bwd: PoseSE3,
    K: Intrinsics,
    cfg: LossConfig | None = None,
) -> float:
    """L_pe(I_t1, I_t warped to t+1) + L_pe(I_t, I_t1 warped to t).

    ``T_fwd`` maps frame-t camera points into frame t+1, ``T_bwd`` the reverse.
    The two poses are used as given; they need not be exact inverses.
    """
    cfg = cfg or LossConfig()
    a, b = _bilateral_terms(I_t, I_t1, D_t, D_t1, T_fwd, T_bwd, K, cfg)
    return a.mean() + b.mean()


def multi_region_loss(
    frames: tuple[ImageBuffer, ImageBuffer],
    depths: tuple[DepthMap, DepthMap],
    poses,
    labels: RegionLabels,
    K: Intrinsics,
    cfg: LossConfig | None = None,
    labels_t1: RegionLabels | None = None,
) -> LossReport:
    """Sum of per-region bilateral losses.

    ``poses[i]`` is the ``(T_fwd, T_bwd)`` pair of region ``i`` (0 = static).
    ``labels`` partitions frame t and ``labels_t1`` frame t+1 (defaults to
    ``labels``). A region whose masked frames share no valid pixel is left out
    of the sum and listed in ``report.excluded``.
    """
    cfg = cfg or LossConfig()
    I_t, I_t1 = frames
    D_t, D_t1 = depths
    labels_t1 = labels if labels_t1 is None else labels_t1
    poses = list(poses)
    if len(poses) != labels.k + 1:
        raise ShapeError(f"need one pose pair per region: {labels.k + 1} regions, {len(poses)} pairs")
    if labels_t1.k > labels.k:
        raise ShapeError("frame t+1 labels have more regions than frame t labels")
    terms, counts, excluded = [], {}, []
    for region, (T_fwd, T_bwd) in enumerate(poses):
        name = "L_ph_s" if region == 0 else f"L_ph_m{region}"
        R_t = mask_image(I_t, labels, region)
        R_t1 = mask_image(I_t1, labels_t1, region) if region <= labels_t1.k else ImageBuffer(
            np.zeros_like(I_t1.data), np.zeros(I_t1.shape, dtype=bool)
        )
        a, b = _bilateral_terms(R_t, R_t1, D_t, D_t1, T_fwd, T_bwd, K, cfg)
        if a.is_empty or b.is_empty:
            excluded.append(region)
            terms.append(0.0)
            counts[name] = 0
            continue
        terms.append(a.mean() + b.mean())
        counts[name] = int(a.mask.sum() + b.mask.sum())
    if len(excluded) == len(terms):
        raise EmptyDomainError("no region has a jointly valid pixel")
    ph_static = terms[0]
    ph_motion = terms[1:]
    ph = ph_static + sum(ph_motion)
    counts["L_ph"] = sum(v for k, v in counts.items() if k.startswith("L_ph_"))
    return LossReport(ph_static, ph_motion, ph, counts=counts, excluded=excluded)


def flow_loss(O_hat: FlowField, O: FlowField) -> float:
    """Mean endpoint error over jointly valid pixels."""
    epe = endpoint_error_map(O_hat, O)
    if epe.is_empty:
        raise EmptyDomainError("flow loss needs at least one jointly valid pixel")
    return epe.mean()


def combined_losses(L_ph: float, L_flow: float, cfg: LossConfig | None = None) -> tuple[float, float, float]:
    """(L_depth, L_pose, L_optical); the depth and pose objectives coincide."""
    cfg = cfg or LossConfig()
    if L_ph < 0 or L_flow < 0:
        raise ValueError("loss terms must be non-negative")
    joint = L_ph + cfg.lam * L_flow
    return joint, joint, L_flow


def with_flow(report: LossReport, L_flow: float, n_flow: int, cfg: LossConfig | None = None) -> LossReport:
    """Fill the flow and combined terms of a report."""
    report.flow = L_flow
    report.depth, report.pose, report.optical = combined_losses(report.ph, L_flow, cfg)
    report.counts["L_flow"] = n_flow
    return report
