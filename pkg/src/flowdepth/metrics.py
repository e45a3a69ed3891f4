"""Depth and flow evaluation: median scaling, capped depth errors, EPE and F1-all."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DomainError, EmptyDomainError, ShapeError
from .flow import FlowField, endpoint_error_map
from .geometry import DepthMap

DEPTH_COLUMNS = ("AbsRel", "SqRel", "RMS", "RMSlog", "d1", "d2", "d3")
MIN_GT_DEPTH = 1e-3


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rms: float
    rms_log: float
    delta1: float
    delta2: float
    delta3: float
    count: int

    def values(self) -> tuple[float, ...]:
        return (self.abs_rel, self.sq_rel, self.rms, self.rms_log, self.delta1, self.delta2, self.delta3)


@dataclass(frozen=True)
class FlowMetrics:
    epe: float
    f1_all: float
    count: int


def median_scale(pred: DepthMap, gt: DepthMap, mask: np.ndarray | None = None) -> tuple[DepthMap, float]:
    """Rescale ``pred`` so its median over the joint valid set matches ``gt``'s."""
    if pred.shape != gt.shape:
        raise ShapeError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    joint = pred.mask & gt.mask
    if mask is not None:
        joint &= mask
    if not joint.any():
        raise EmptyDomainError("median scaling needs jointly valid pixels")
    med_pred = float(np.median(pred.depth[joint]))
    if med_pred == 0:
        raise DomainError("median of the prediction is zero")
    scale = float(np.median(gt.depth[joint])) / med_pred
    return DepthMap(np.where(pred.mask, pred.depth * scale, 0.0), pred.mask), scale


def depth_metrics(
    pred: DepthMap,
    gt: DepthMap,
    cap_min: float = 0.0,
    cap_max: float = 120.0,
    use_median_scaling: bool = True,
) -> DepthMetrics:
    """Standard depth errors on pixels where gt is valid and inside the caps.

    A zero lower cap is applied as gt > 1e-3 m. Predictions are median-scaled
    (optional) and then clamped to the caps.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    lo = max(cap_min, MIN_GT_DEPTH)
    evaluable = gt.mask & pred.mask & (gt.depth > lo) & (gt.depth < cap_max)
    if not evaluable.any():
        raise EmptyDomainError("no ground-truth pixel inside the depth caps")
    if use_median_scaling:
        pred, _ = median_scale(pred, gt, evaluable)
    p = np.clip(pred.depth[evaluable], lo, cap_max)
    g = gt.depth[evaluable]
    ratio = np.maximum(p / g, g / p)
    err = p - g
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err**2 / g)),
        rms=float(np.sqrt(np.mean(err**2))),
        rms_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        count=int(evaluable.sum()),
    )


def flow_metrics(pred: FlowField, gt: FlowField, abs_px: float = 3.0, rel: float = 0.05) -> FlowMetrics:
    """Mean EPE and the KITTI 2015 outlier rate (EPE > 3 px and > 5 % of |gt|)."""
    epe = endpoint_error_map(pred, gt)
    if epe.is_empty:
        raise EmptyDomainError("flow metrics need jointly valid pixels")
    e = epe.values[epe.mask]
    mag = np.hypot(gt.flow[..., 0], gt.flow[..., 1])[epe.mask]
    outlier = (e > abs_px) & (e > rel * mag)
    return FlowMetrics(float(e.mean()), float(outlier.mean()), int(epe.mask.sum()))


def format_depth_table(rows: dict[str, DepthMetrics]) -> str:
    head = f"{'':<12}" + "".join(f"{c:>10}" for c in DEPTH_COLUMNS)
    lines = [head]
    for name, m in rows.items():
        lines.append(f"{name:<12}" + "".join(f"{v:>10.4f}" for v in m.values()))
    return "\n".join(lines) + "\n"


def depth_csv(rows: dict[str, DepthMetrics]) -> str:
    lines = ["name," + ",".join(DEPTH_COLUMNS) + ",count"]
    for name, m in rows.items():
        lines.append(name + "," + ",".join(repr(v) for v in m.values()) + f",{m.count}")
    return "\n".join(lines) + "\n"


def format_flow_table(rows: dict[str, FlowMetrics]) -> str:
    lines = [f"{'':<12}{'EPE':>10}{'F1-all':>10}"]
    for name, m in rows.items():
        lines.append(f"{name:<12}{m.epe:>10.3f}{m.f1_all:>10.4f}")
    return "\n".join(lines) + "\n"


def flow_csv(rows: dict[str, FlowMetrics]) -> str:
    lines = ["name,EPE,F1-all,count"]
    for name, m in rows.items():
        lines.append(f"{name},{m.epe!r},{m.f1_all!r},{m.count}")
    return "\n".join(lines) + "\n"


def as_dict(m) -> dict:
    return {f.name: getattr(m, f.name) for f in fields(m)}
