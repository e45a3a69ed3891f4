"""Command-line entry point: ``flowdepth {gen,segment,losses,eval,optimize,pipeline}``.

Every run writes ``config.json`` (the fully resolved configuration) next to
its outputs. Rasters use the KITTI PNG codecs, poses the KITTI 3x4 text
layout (one line per region, region 0 first) and intrinsics a ``P2`` line.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kitti_io as kio
from . import synth
from .errors import ConfigError, FlowDepthError
from .flow import composite_flow, synthesize_flow
from .loss import LossConfig, flow_loss, multi_region_loss, with_flow
from .metrics import (
    depth_csv,
    depth_metrics,
    flow_csv,
    flow_metrics,
    format_depth_table,
    format_flow_table,
)
from .optimize import OptimizeConfig, estimate_pose
from .pipeline import run_pipeline
from .segmentation import RegionLabels, SegmentationConfig, segment_motion

log = logging.getLogger("flowdepth")

# file names inside a scene directory written by ``gen``
SCENE_FILES = {
    "frame_t": "frame_t.png",
    "frame_t1": "frame_t1.png",
    "depth_t": "depth_t.png",
    "depth_t1": "depth_t1.png",
    "flow": "flow.png",
    "labels_t": "labels_t.png",
    "labels_t1": "labels_t1.png",
    "calib": "calib.txt",
    "poses": "poses.txt",
    "spec": "scene.ini",
}


@dataclass
class RunConfig:
    subcommand: str
    inputs: dict = field(default_factory=dict)
    output: str | None = None
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    cap_min: float = 0.0
    cap_max: float = 120.0
    median_scaling: bool = True
    seed: int | None = None

    def __post_init__(self):
        if not 0 <= self.cap_min < self.cap_max:
            raise ConfigError(f"depth caps must satisfy 0 <= min < max, got {self.cap_min}, {self.cap_max}")

    def to_json(self) -> str:
        # the output directory is where this file lives; leaving it out keeps
        # reruns into different directories byte-identical
        d = dataclasses.asdict(self)
        d.pop("output")
        return json.dumps(d, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


# ----------------------------------------------------------------------------
# argument parsing


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_tuple(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_seg_args(p):
    g = p.add_argument_group("segmentation")
    g.add_argument("--kernels", type=_int_tuple, help="box kernel sizes, e.g. 3,5,9")
    g.add_argument("--threshold", type=float, help="Sobel magnitude threshold")
    g.add_argument("--min-area", type=int, help="minimum motion-region area in pixels")
    g.add_argument("--closing-radius", type=int)


def _add_loss_args(p):
    g = p.add_argument_group("loss")
    g.add_argument("--alpha", type=float, help="SSIM weight in L_pe")
    g.add_argument("--lam", type=float, help="flow-loss weight")
    g.add_argument("--ssim-window", type=int)
    g.add_argument("--smooth-l1", action="store_true", default=None, help="smooth-L1 photometric term")


def _add_opt_args(p):
    g = p.add_argument_group("optimizer")
    g.add_argument("--max-iterations", type=int)
    g.add_argument("--tolerance", type=float)
    g.add_argument("--method", choices=["bfgs", "gd"])
    g.add_argument("--gradient", choices=["analytic", "numeric"])
    g.add_argument("--blur-sigmas", type=_float_tuple, help="coarse-to-fine blur schedule, e.g. 4,2,1,0")


def _add_metric_args(p):
    g = p.add_argument_group("metrics")
    g.add_argument("--cap-min", type=float)
    g.add_argument("--cap-max", type=float)
    g.add_argument("--no-median-scaling", dest="median_scaling", action="store_false", default=None)


def _add_scene_args(p, frames=True, depths=True):
    p.add_argument("--scene", help="directory written by 'gen'; fills any input not given explicitly")
    if frames:
        p.add_argument("--frames", nargs=2, metavar=("T", "T1"), help="frame PNGs at t and t+1")
    if depths:
        p.add_argument("--depths", nargs=2, metavar=("DT", "DT1"), help="depth PNGs at t and t+1")
    p.add_argument("--calib", help="calibration file (P2 line)")
    p.add_argument("--calib-key", default="P2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowdepth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--config", help="JSON run configuration; explicit flags override it")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen", help="render a synthetic scene")
    p.add_argument("spec", nargs="?", help="scene spec (INI); omit with --preset")
    p.add_argument("--preset", choices=["ego", "moving", "static"])
    p.add_argument("--object-size", type=int, default=100)
    p.add_argument("--shape", choices=["rect", "ellipse"], default="rect")
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("segment", help="motion segmentation of a flow PNG")
    p.add_argument("flow", help="flow PNG")
    p.add_argument("--gt", help="ground-truth label PNG for IoU")
    p.add_argument("-o", "--out", required=True)
    _add_seg_args(p)

    p = sub.add_parser("losses", help="loss report for given frames, depths, poses and labels")
    _add_scene_args(p)
    p.add_argument("--poses", help="pose file, one line per region (frame t -> frame t+1)")
    p.add_argument("--labels", help="frame-t label PNG (default: single region)")
    p.add_argument("--labels-t1", help="frame-t+1 label PNG (default: frame-t labels)")
    p.add_argument("--flow", help="reference flow PNG for L_flow")
    p.add_argument("-o", "--out", required=True)
    _add_loss_args(p)

    p = sub.add_parser("eval", help="KITTI depth and flow metrics")
    p.add_argument("--depth-pred", nargs="*", default=[])
    p.add_argument("--depth-gt", nargs="*", default=[])
    p.add_argument("--flow-pred", nargs="*", default=[])
    p.add_argument("--flow-gt", nargs="*", default=[])
    p.add_argument("-o", "--out", help="directory for CSV output")
    _add_metric_args(p)

    p = sub.add_parser("optimize", help="direct pose estimation for one frame pair")
    _add_scene_args(p)
    p.add_argument("--init", help="pose file whose first line is the initial pose")
    p.add_argument("--flow", help="reference flow PNG adding lam * L_flow to the objective")
    p.add_argument("-o", "--out", required=True)
    _add_loss_args(p)
    _add_opt_args(p)

    p = sub.add_parser("pipeline", help="segment, estimate per-region poses, composite flow, report")
    _add_scene_args(p)
    p.add_argument("--flow", help="flow PNG standing in for the flow network")
    p.add_argument("--poses", help="per-region poses; with --decompose, frame-t depth comes from the flow")
    p.add_argument("--decompose", action="store_true", help="decompose frame-t depth from flow using --poses")
    p.add_argument("--labels-t1", help="frame-t+1 labels (default: labels splatted along the flow)")
    p.add_argument("--gt-flow", help="ground-truth flow PNG for metrics")
    p.add_argument("--gt-depth", help="ground-truth frame-t depth PNG for metrics")
    p.add_argument("--gt-labels", help="ground-truth frame-t labels for IoU")
    p.add_argument("--baseline", action="store_true", help="also fit and report a single whole-frame pose")
    p.add_argument("-o", "--out", required=True)
    _add_seg_args(p)
    _add_loss_args(p)
    _add_opt_args(p)
    _add_metric_args(p)
    return parser


_SEG_KEYS = {"kernels": "kernels", "threshold": "threshold", "min_area": "min_area", "closing_radius": "closing_radius"}
_LOSS_KEYS = {"alpha": "alpha", "lam": "lam", "ssim_window": "ssim_window", "smooth_l1": "smooth_l1"}
_OPT_KEYS = {
    "max_iterations": "max_iterations",
    "tolerance": "tolerance",
    "method": "method",
    "gradient": "gradient",
    "blur_sigmas": "blur_sigmas",
}


def _overrides(args, keys) -> dict:
    return {dst: getattr(args, src) for src, dst in keys.items() if getattr(args, src, None) is not None}


def resolve_config(args) -> RunConfig:
    """Defaults, then the --config file, then explicit flags; validated up front."""
    base: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
    seg = dict(base.get("segmentation", {}), **_overrides(args, _SEG_KEYS))
    loss = dict(base.get("loss", {}), **_overrides(args, _LOSS_KEYS))
    opt = dict(base.get("optimize", {}), **_overrides(args, _OPT_KEYS))
    for d, key in ((seg, "kernels"), (opt, "blur_sigmas")):
        if key in d:
            d[key] = tuple(d[key])
    try:
        seg_cfg = SegmentationConfig(**seg)
        loss_cfg = LossConfig(**loss)
        opt_cfg = OptimizeConfig(**opt)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    inputs = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in {"config", "verbose", "subcommand", "out", "seed", "cap_min", "cap_max", "median_scaling"}
        and k not in _SEG_KEYS and k not in _LOSS_KEYS and k not in _OPT_KEYS
    }
    pick = lambda name, default: getattr(args, name, None) if getattr(args, name, None) is not None else base.get(name, default)  # noqa: E731
    return RunConfig(
        subcommand=args.subcommand,
        inputs=inputs,
        output=getattr(args, "out", None),
        segmentation=seg_cfg,
        loss=loss_cfg,
        optimize=opt_cfg,
        cap_min=float(pick("cap_min", 0.0)),
        cap_max=float(pick("cap_max", 120.0)),
        median_scaling=bool(pick("median_scaling", True)),
        seed=pick("seed", None),
    )


# ----------------------------------------------------------------------------
# helpers


def _scene_path(args, key: str, explicit=None):
    if explicit:
        return explicit
    if getattr(args, "scene", None):
        return os.path.join(args.scene, SCENE_FILES[key])
    return None


def _require(path, what: str):
    if not path:
        raise ConfigError(f"missing input: {what} (pass it explicitly or via --scene)")
    return path


def _load_pair(args):
    frames = getattr(args, "frames", None) or [None, None]
    depths = getattr(args, "depths", None) or [None, None]
    I_t = kio.read_image(_require(_scene_path(args, "frame_t", frames[0]), "frame t"))
    I_t1 = kio.read_image(_require(_scene_path(args, "frame_t1", frames[1]), "frame t+1"))
    D_t = kio.read_depth_png(_require(_scene_path(args, "depth_t", depths[0]), "depth t"))
    D_t1 = kio.read_depth_png(_require(_scene_path(args, "depth_t1", depths[1]), "depth t+1"))
    return I_t, I_t1, D_t, D_t1


def _load_K(args, shape):
    path = _require(_scene_path(args, "calib", args.calib), "calibration")
    return kio.read_calibration(path, key=args.calib_key, target_size=shape).K


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_config(out: Path, cfg: RunConfig):
    _write_text(out / "config.json", cfg.to_json())


def _iou(pred: RegionLabels, gt: RegionLabels) -> list[float]:
    """Best-overlap IoU for each ground-truth motion region."""
    scores = []
    for g in range(1, gt.k + 1):
        G = gt.region(g)
        best = 0.0
        for p in range(1, pred.k + 1):
            P = pred.region(p)
            union = (P | G).sum()
            best = max(best, float((P & G).sum() / union) if union else 0.0)
        scores.append(best)
    return scores


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen(args, cfg: RunConfig) -> int:
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            spec = synth.loads_spec(fh.read())
        if args.seed is not None:
            spec = synth.with_seed(spec, args.seed)
    else:
        seed = 0 if args.seed is None else args.seed
        if args.preset == "moving":
            spec = synth.moving_object_spec(seed, args.object_size, args.height, args.width, shape=args.shape)
        elif args.preset == "ego":
            spec = synth.ego_scene_spec(seed, args.height, args.width)
        elif args.preset == "static":
            spec = dataclasses.replace(synth.ego_scene_spec(seed, args.height, args.width), ego=synth.PoseSE3.identity())
        else:
            raise ConfigError("pass a spec file or --preset")
    bundle = synth.generate(spec)
    out = _out_dir(args.out)
    f = SCENE_FILES
    kio.write_image(bundle.I_t, out / f["frame_t"])
    kio.write_image(bundle.I_t1, out / f["frame_t1"])
    kio.write_depth_png(bundle.D_t, out / f["depth_t"])
    kio.write_depth_png(bundle.D_t1, out / f["depth_t1"])
    kio.write_flow_png(bundle.O_gt, out / f["flow"])
    kio.write_labels_png(bundle.labels_gt, out / f["labels_t"])
    kio.write_labels_png(bundle.labels_t1, out / f["labels_t1"])
    kio.write_calibration(spec.K, out / f["calib"])
    kio.write_poses(bundle.region_poses, out / f["poses"])
    _write_text(out / f["spec"], synth.dumps_spec(spec))
    digest = synth.spec_digest(spec)
    _write_text(out / "digest.txt", digest + "\n")
    cfg.seed = spec.seed
    _write_config(out, cfg)
    print(f"digest={digest}")
    print(f"regions={bundle.labels_gt.k + 1} size={spec.K.height}x{spec.K.width} out={out}")
    return 0


def cmd_segment(args, cfg: RunConfig) -> int:
    O = kio.read_flow_png(args.flow)
    labels = segment_motion(O, cfg.segmentation)
    out = _out_dir(args.out)
    kio.write_labels_png(labels, out / "labels.png")
    lines = [f"k={labels.k}"]
    lines += [f"region {r}: {int(labels.counts[r])} px" for r in range(labels.k + 1)]
    if args.gt:
        for g, score in enumerate(_iou(labels, kio.read_labels_png(args.gt)), start=1):
            lines.append(f"iou[{g}]={score:.4f}")
    text = "\n".join(lines) + "\n"
    _write_text(out / "summary.txt", text)
    _write_config(out, cfg)
    sys.stdout.write(text)
    return 0


def cmd_losses(args, cfg: RunConfig) -> int:
    I_t, I_t1, D_t, D_t1 = _load_pair(args)
    K = _load_K(args, I_t.shape)
    poses_path = _scene_path(args, "poses", args.poses)
    labels_path = _scene_path(args, "labels_t", args.labels)
    labels_t1_path = _scene_path(args, "labels_t1", args.labels_t1)
    poses = kio.read_poses(poses_path) if poses_path else [synth.PoseSE3.identity()]
    labels = kio.read_labels_png(labels_path) if labels_path else RegionLabels(np.zeros(I_t.shape, dtype=np.int64))
    labels_t1 = kio.read_labels_png(labels_t1_path) if labels_t1_path else None
    report = multi_region_loss(
        (I_t, I_t1), (D_t, D_t1), [(p, p.inverse()) for p in poses], labels, K, cfg.loss, labels_t1
    )
    flow_path = _scene_path(args, "flow", args.flow)
    if flow_path:
        O = kio.read_flow_png(flow_path)
        parts = [(synthesize_flow(D_t, p, K), labels, r) for r, p in enumerate(poses)]
        O_hat = composite_flow(parts)
        report = with_flow(report, flow_loss(O_hat, O), int((O_hat.mask & O.mask).sum()), cfg.loss)
    out = _out_dir(args.out)
    _write_text(out / "losses.txt", report.to_text())
    _write_text(out / "losses.csv", report.to_csv())
    _write_config(out, cfg)
    sys.stdout.write(report.to_text())
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    if len(args.depth_pred) != len(args.depth_gt) or len(args.flow_pred) != len(args.flow_gt):
        raise ConfigError("prediction and ground-truth lists must have equal length")
    if not args.depth_pred and not args.flow_pred:
        raise ConfigError("nothing to evaluate")
    text, out = [], None
    if args.out:
        out = _out_dir(args.out)
    if args.depth_pred:
        rows = {}
        for pred, gt in zip(args.depth_pred, args.depth_gt):
            rows[Path(pred).name] = depth_metrics(
                kio.read_depth_png(pred),
                kio.read_depth_png(gt),
                cap_min=cfg.cap_min,
                cap_max=cfg.cap_max,
                use_median_scaling=cfg.median_scaling,
            )
        if len(rows) > 1:
            rows["mean"] = _mean_depth(list(rows.values()))
        text.append(format_depth_table(rows))
        if out:
            _write_text(out / "depth_metrics.csv", depth_csv(rows))
    if args.flow_pred:
        rows = {}
        for pred, gt in zip(args.flow_pred, args.flow_gt):
            rows[Path(pred).name] = flow_metrics(kio.read_flow_png(pred), kio.read_flow_png(gt))
        text.append(format_flow_table(rows))
        if out:
            _write_text(out / "flow_metrics.csv", flow_csv(rows))
    if out:
        _write_config(out, cfg)
        _write_text(out / "metrics.txt", "\n".join(text))
    sys.stdout.write("\n".join(text))
    return 0


def _mean_depth(rows):
    from .metrics import DepthMetrics

    fields = [f.name for f in dataclasses.fields(DepthMetrics) if f.name != "count"]
    return DepthMetrics(**{k: float(np.mean([getattr(r, k) for r in rows])) for k in fields}, count=sum(r.count for r in rows))


def cmd_optimize(args, cfg: RunConfig) -> int:
    I_t, I_t1, D_t, D_t1 = _load_pair(args)
    K = _load_K(args, I_t.shape)
    init = kio.read_poses(args.init)[0] if args.init else None
    ref = kio.read_flow_png(args.flow) if args.flow else None
    pose, trace = estimate_pose(I_t, I_t1, D_t, D_t1, K, init=init, cfg=cfg.optimize, loss_cfg=cfg.loss, ref_flow=ref)
    out = _out_dir(args.out)
    kio.write_poses([pose], out / "pose.txt")
    _write_text(out / "trace.csv", trace.to_csv())
    _write_config(out, cfg)
    aa = pose.axis_angle
    print(f"status={trace.status} iterations={trace.iterations} loss={trace.losses[-1]:.9g}")
    print(f"rotation_deg={np.rad2deg(np.linalg.norm(aa)):.6f} translation={' '.join(f'{x:.6f}' for x in pose.translation)}")
    return 0


def cmd_pipeline(args, cfg: RunConfig) -> int:
    frames = args.frames or [None, None]
    depths = args.depths or [None, None]
    I_t = kio.read_image(_require(_scene_path(args, "frame_t", frames[0]), "frame t"))
    I_t1 = kio.read_image(_require(_scene_path(args, "frame_t1", frames[1]), "frame t+1"))
    O = kio.read_flow_png(_require(_scene_path(args, "flow", args.flow), "flow"))
    K = _load_K(args, I_t.shape)
    D_t1 = kio.read_depth_png(_require(_scene_path(args, "depth_t1", depths[1]), "depth t+1"))
    init_poses = kio.read_poses(args.poses) if args.poses else None
    if args.decompose:
        D_t = None
        if init_poses is None:
            raise ConfigError("--decompose needs --poses")
    else:
        D_t = kio.read_depth_png(_require(_scene_path(args, "depth_t", depths[0]), "depth t"))
    labels_t1 = kio.read_labels_png(args.labels_t1) if args.labels_t1 else None

    res = run_pipeline(
        I_t, I_t1, O, K, D_t, D_t1, cfg.segmentation, cfg.loss, cfg.optimize,
        labels_t1=labels_t1, init_poses=init_poses, single_pose_baseline=args.baseline,
    )
    out = _out_dir(args.out)
    kio.write_labels_png(res.labels, out / "labels_t.png")
    kio.write_labels_png(res.labels_t1, out / "labels_t1.png")
    kio.write_poses(res.poses, out / "poses.txt")
    kio.write_flow_png(res.flow, out / "flow_hat.png")
    for r, trace in enumerate(res.traces):
        _write_text(out / f"trace_region{r}.csv", trace.to_csv())

    lines = [f"k={res.labels.k}"]
    lines += [f"note: {n}" for n in res.notes]
    lines.append("")
    lines.append(res.report.to_text())
    csv = ["section,name,value"] + [f"loss,{n},{v!r}" for n, v, _ in res.report.rows()]
    if res.single_report is not None:
        lines.append(f"single-pose baseline: L_ph={res.single_report.ph:.9f} L_flow={res.single_report.flow:.9f}")
        csv += [f"baseline,L_ph,{res.single_report.ph!r}", f"baseline,L_flow,{res.single_report.flow!r}"]
    gt_flow = _scene_path(args, "flow", args.gt_flow) if args.gt_flow or args.scene else None
    if gt_flow:
        fm = flow_metrics(res.flow, kio.read_flow_png(gt_flow))
        lines.append(format_flow_table({"composite": fm}))
        csv += [f"flow,EPE,{fm.epe!r}", f"flow,F1-all,{fm.f1_all!r}"]
    gt_depth = _scene_path(args, "depth_t", args.gt_depth) if args.gt_depth or (args.scene and args.decompose) else None
    if gt_depth and res.depth_t is not None:
        dm = depth_metrics(res.depth_t, kio.read_depth_png(gt_depth), cfg.cap_min, cfg.cap_max, cfg.median_scaling)
        lines.append(format_depth_table({"depth_t": dm}))
        csv += [f"depth,{k},{v!r}" for k, v in zip(("AbsRel", "SqRel", "RMS", "RMSlog", "d1", "d2", "d3"), dm.values())]
    gt_labels = _scene_path(args, "labels_t", args.gt_labels) if args.gt_labels or args.scene else None
    if gt_labels:
        for g, score in enumerate(_iou(res.labels, kio.read_labels_png(gt_labels)), start=1):
            lines.append(f"iou[{g}]={score:.4f}")
            csv.append(f"segmentation,iou{g},{score!r}")
    text = "\n".join(lines).rstrip("\n") + "\n"
    _write_text(out / "report.txt", text)
    _write_text(out / "report.csv", "\n".join(csv) + "\n")
    _write_config(out, cfg)
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "segment": cmd_segment,
    "losses": cmd_losses,
    "eval": cmd_eval,
    "optimize": cmd_optimize,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.subcommand](args, cfg)
    except (FlowDepthError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"flowdepth {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
