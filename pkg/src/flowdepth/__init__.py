"""Geometric core of joint self-supervised depth and optical-flow estimation:
flow <-> (depth, pose) conversion, bilateral photometric losses, flow-based
motion segmentation, direct pose optimization and KITTI-style evaluation."""

from .errors import *  # noqa: F401,F403
from .flow import FlowField, ScalarField, composite_flow, decompose_flow, synthesize_flow
from .geometry import (
    DepthMap,
    ImageBuffer,
    Intrinsics,
    PixelGrid,
    PoseSE3,
    pose_apply,
    pose_compose,
    pose_invert,
    reproject_coords,
    sample_bilinear,
    warp_image,
)
from .loss import LossConfig, LossReport, bilateral_reprojection_loss, flow_loss, multi_region_loss, photometric_error
from .metrics import DepthMetrics, FlowMetrics, depth_metrics, flow_metrics, median_scale
from .optimize import OptimizeConfig, OptimizeTrace, estimate_pose
from .pipeline import PipelineResult, run_pipeline
from .segmentation import RegionLabels, SegmentationConfig, segment_motion

__version__ = "0.1.0"
