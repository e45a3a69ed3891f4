"""End-to-end joint run: segment a flow field, estimate one pose per motion
region, synthesize and composite flow, and score everything."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowField, composite_flow, decompose_flow, synthesize_flow
from .geometry import DepthMap, ImageBuffer, Intrinsics, PoseSE3
from .loss import LossConfig, LossReport, flow_loss, multi_region_loss, with_flow
from .optimize import OptimizeConfig, OptimizeTrace, estimate_pose
from .segmentation import RegionLabels, SegmentationConfig, mask_image, segment_motion

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    labels: RegionLabels
    labels_t1: RegionLabels
    poses: list[PoseSE3]
    traces: list[OptimizeTrace]
    flow: FlowField
    report: LossReport
    depth_t: DepthMap | None = None
    single_pose: PoseSE3 | None = None
    single_report: LossReport | None = None
    notes: list[str] = field(default_factory=list)


def splat_labels(labels: RegionLabels, O: FlowField) -> RegionLabels:
    """Frame t+1 labels by pushing each frame-t label along its flow vector.

    Targets are rounded to the nearest pixel; collisions keep the highest
    label (moving regions sit in front of the backdrop in the usual case).
    One-pixel cracks (same label on both sides) are closed; every other hole
    is a disocclusion or newly visible margin and goes to the static region 0.
    """
    H, W = labels.shape
    out = np.full((H, W), -1, dtype=np.int64)
    ys, xs = np.nonzero(O.mask)
    tu = np.floor(xs + O.flow[ys, xs, 0] + 0.5).astype(np.int64)
    tv = np.floor(ys + O.flow[ys, xs, 1] + 0.5).astype(np.int64)
    keep = (tu >= 0) & (tu < W) & (tv >= 0) & (tv < H)
    np.maximum.at(out, (tv[keep], tu[keep]), labels.labels[ys[keep], xs[keep]])
    if (out < 0).all():
        return RegionLabels(np.zeros((H, W), dtype=np.int64))
    out = _close_cracks(out)
    out[out < 0] = 0
    present = np.unique(out)
    if len(present) == labels.k + 1:
        return RegionLabels(out)
    # a region that vanished entirely would break contiguity; keep ids dense
    log.warning("regions %s vanished after splatting", sorted(set(range(labels.k + 1)) - set(present.tolist())))
    lut = np.zeros(labels.k + 1, dtype=np.int64)
    lut[present] = np.arange(len(present))
    return RegionLabels(lut[out])


def _close_cracks(out: np.ndarray) -> np.ndarray:
    p = np.pad(out, 1, constant_values=-1)
    hole = out < 0
    for a, b in ((p[1:-1, :-2], p[1:-1, 2:]), (p[:-2, 1:-1], p[2:, 1:-1])):
        fix = hole & (a == b) & (a >= 0)
        out = np.where(fix, a, out)
        hole &= ~fix
    return out


def run_pipeline(
    I_t: ImageBuffer,
    I_t1: ImageBuffer,
    O: FlowField,
    K: Intrinsics,
    D_t: DepthMap | None = None,
    D_t1: DepthMap | None = None,
    seg_cfg: SegmentationConfig | None = None,
    loss_cfg: LossConfig | None = None,
    opt_cfg: OptimizeConfig | None = None,
    labels_t1: RegionLabels | None = None,
    init_poses: list[PoseSE3] | None = None,
    single_pose_baseline: bool = False,
    use_flow_term: bool = True,
) -> PipelineResult:
    """Joint run on one frame pair.

    ``O`` stands in for the flow network. Depth comes from ``D_t``/``D_t1``
    when given; otherwise ``D_t`` is decomposed from ``O`` per region with
    that region's estimate (which needs depth to exist first, so in that case
    ``init_poses`` must be supplied and are used as the poses).
    """
    seg_cfg = seg_cfg or SegmentationConfig()
    loss_cfg = loss_cfg or LossConfig()
    opt_cfg = opt_cfg or OptimizeConfig()
    notes: list[str] = []

    labels = segment_motion(O, seg_cfg)
    if labels_t1 is None:
        labels_t1 = splat_labels(labels, O)
    if labels_t1.k != labels.k:
        notes.append(f"frame t+1 labels have {labels_t1.k} motion regions, frame t has {labels.k}")

    if D_t is None:
        if init_poses is None or len(init_poses) != labels.k + 1:
            raise ValueError("without depth maps one pose per segmented region must be supplied")
        D_t = _decompose_regions(O, labels, init_poses, K)
        notes.append("frame-t depth decomposed from flow")
    if D_t1 is None:
        raise ValueError("frame t+1 depth is required")

    poses, traces = [], []
    for region in range(labels.k + 1):
        R_t = mask_image(I_t, labels, region)
        # a region missing from frame t+1 falls back to the whole frame
        R_t1 = mask_image(I_t1, labels_t1, region) if region <= labels_t1.k else I_t1
        init = init_poses[region] if init_poses is not None else None
        ref = FlowField(O.flow, O.mask & labels.region(region)) if use_flow_term else None
        pose, trace = estimate_pose(R_t, R_t1, D_t, D_t1, K, init=init, cfg=opt_cfg, loss_cfg=loss_cfg, ref_flow=ref)
        log.info("region %d: %d iterations, loss %.6g (%s)", region, trace.iterations, trace.losses[-1], trace.status)
        poses.append(pose)
        traces.append(trace)

    parts = [(synthesize_flow(D_t, pose, K), labels, r) for r, pose in enumerate(poses)]
    O_hat = composite_flow(parts)

    pairs = [(p, p.inverse()) for p in poses]
    report = multi_region_loss((I_t, I_t1), (D_t, D_t1), pairs, labels, K, loss_cfg, labels_t1)
    n_flow = int((O_hat.mask & O.mask).sum())
    report = with_flow(report, flow_loss(O_hat, O), n_flow, loss_cfg)

    result = PipelineResult(labels, labels_t1, poses, traces, O_hat, report, D_t, notes=notes)
    if single_pose_baseline:
        single, _ = estimate_pose(I_t, I_t1, D_t, D_t1, K, init=poses[0], cfg=opt_cfg, loss_cfg=loss_cfg)
        whole = RegionLabels(np.zeros(labels.shape, dtype=np.int64))
        srep = multi_region_loss((I_t, I_t1), (D_t, D_t1), [(single, single.inverse())], whole, K, loss_cfg)
        O_single = synthesize_flow(D_t, single, K)
        result.single_pose = single
        result.single_report = with_flow(srep, flow_loss(O_single, O), int((O_single.mask & O.mask).sum()), loss_cfg)
    return result


def _decompose_regions(O: FlowField, labels: RegionLabels, poses, K: Intrinsics) -> DepthMap:
    depth = np.zeros(labels.shape)
    mask = np.zeros(labels.shape, dtype=bool)
    for region, pose in enumerate(poses):
        D = decompose_flow(O, pose, K)
        sel = labels.region(region) & D.mask
        depth[sel] = D.depth[sel]
        mask |= sel
    return DepthMap(depth, mask)
