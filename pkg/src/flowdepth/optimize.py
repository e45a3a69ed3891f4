"""Direct pose estimation by minimizing the bilateral photometric loss.

Poses are searched in a local chart around a center pose C:

    T(w, tau) = (exp(w) R_C, t_C + tau)

and the chart is re-centered on every accepted step. The objective is
``bilateral_reprojection_loss(T, T^-1)`` optionally plus ``lam * flow_loss``
against a reference flow; its gradient is computed analytically through the
SSIM windows, the bilinear sampler and the pinhole projection.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .errors import ConfigError, EmptyDomainError, OptimizationError, ProbeError
from .flow import FlowField, synthesize_flow
from .geometry import (
    EDGE_TOL,
    DepthMap,
    ImageBuffer,
    Intrinsics,
    PoseSE3,
    axis_angle_to_quat,
    bilinear_taps,
    left_jacobian,
    pixel_grid,
    pose_compose,
    pose_invert,
    quat_to_axis_angle,
)
from .loss import LossConfig, bilateral_reprojection_loss, flow_loss, photometric_error_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizeConfig:
    max_iterations: int = 100
    tolerance: float = 1e-12  # relative loss decrease below which a level stops
    grad_tolerance: float = 1e-10
    method: str = "bfgs"  # "bfgs" or "gd"
    gradient: str = "analytic"  # "analytic" or "numeric"
    max_rotation_step: float = np.deg2rad(2.0)
    max_translation_step: float = 0.1
    fd_epsilon: float = 1e-6
    max_halvings: int = 20
    coarse_tolerance: float = 1e-6  # same, for the blurred stages
    blur_sigmas: tuple[float, ...] = (4.0, 2.0, 1.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "blur_sigmas", tuple(float(s) for s in self.blur_sigmas))
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.max_halvings < 1:
            raise ConfigError("max_halvings must be >= 1")
        if self.tolerance <= 0 or self.coarse_tolerance <= 0 or self.grad_tolerance <= 0 or self.fd_epsilon <= 0:
            raise ConfigError("tolerances and the finite-difference step must be positive")
        if self.max_rotation_step <= 0 or self.max_translation_step <= 0:
            raise ConfigError("step bounds must be positive")
        if self.method not in ("bfgs", "gd"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.gradient not in ("analytic", "numeric"):
            raise ConfigError(f"unknown gradient mode {self.gradient!r}")
        if not self.blur_sigmas or self.blur_sigmas[-1] != 0.0 or min(self.blur_sigmas) < 0:
            raise ConfigError("blur schedule must be non-negative and end with 0")


@dataclass
class OptimizeTrace:
    """Accepted-step losses of the full-resolution stage (first entry: its start)."""

    losses: list[float] = field(default_factory=list)
    pose: PoseSE3 | None = None
    status: str = "running"
    iterations: int = 0
    stages: list[tuple[float, list[float]]] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status in ("converged", "stalled")

    def to_csv(self) -> str:
        lines = ["stage_sigma,iteration,loss"]
        for sigma, losses in self.stages:
            lines += [f"{sigma!r},{i},{v!r}" for i, v in enumerate(losses)]
        return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# chart


def params_to_pose(params, center: PoseSE3 | None = None) -> PoseSE3:
    center = center or PoseSE3.identity()
    p = np.asarray(params, dtype=float)
    dq = PoseSE3(axis_angle_to_quat(p[:3]))
    rot = pose_compose(dq, PoseSE3(center.quaternion))
    return PoseSE3(rot.quaternion, center.translation + p[3:])


def pose_to_params(pose: PoseSE3, center: PoseSE3 | None = None) -> np.ndarray:
    center = center or PoseSE3.identity()
    rel = pose_compose(PoseSE3(pose.quaternion), pose_invert(PoseSE3(center.quaternion)))
    w = quat_to_axis_angle(rel.quaternion)
    if np.linalg.norm(w) >= np.pi:
        raise ConfigError("pose lies outside the chart (rotation >= pi from center)")
    return np.concatenate([w, pose.translation - center.translation])


# ----------------------------------------------------------------------------
# objective


def pose_loss(
    params,
    I_t: ImageBuffer,
    I_t1: ImageBuffer,
    D_t: DepthMap,
    D_t1: DepthMap,
    K: Intrinsics,
    cfg: LossConfig | None = None,
    center: PoseSE3 | None = None,
    ref_flow: FlowField | None = None,
) -> float:
    """Bilateral loss at T(params) and its inverse, plus lam * L_flow if a reference flow is given."""
    cfg = cfg or LossConfig()
    T = params_to_pose(params, center)
    value = bilateral_reprojection_loss(I_t, I_t1, D_t, D_t1, T, pose_invert(T), K, cfg)
    if ref_flow is not None:
        value += cfg.lam * flow_loss(synthesize_flow(D_t, T, K), ref_flow)
    return value


def _sample_with_derivatives(src: ImageBuffer, u: np.ndarray, v: np.ndarray, grid_valid: np.ndarray):
    """Bilinear values, d/du, d/dv and validity, matching ``sample_bilinear``."""
    H, W = src.shape
    u = np.where(grid_valid, u, 0.0)
    v = np.where(grid_valid, v, 0.0)
    x0, x1, y0, y1, fx, fy = bilinear_taps(u, v, H, W)
    d = src.data
    a, b, c, e = d[y0, x0], d[y0, x1], d[y1, x0], d[y1, x1]
    fx3, fy3 = fx[..., None], fy[..., None]
    val = (1 - fy3) * ((1 - fx3) * a + fx3 * b) + fy3 * ((1 - fx3) * c + fx3 * e)
    inside_u = (u >= -EDGE_TOL) & (u <= W - 1 + EDGE_TOL)
    inside_v = (v >= -EDGE_TOL) & (v <= H - 1 + EDGE_TOL)
    du = ((1 - fy3) * (b - a) + fy3 * (e - c)) * inside_u[..., None]
    dv = ((1 - fx3) * (c - a) + fx3 * (e - b)) * inside_v[..., None]
    valid = grid_valid & inside_u & inside_v
    if src.mask is not None:
        m = src.mask
        valid &= (m[y0, x0] | ((1 - fx) * (1 - fy) == 0)) & (m[y0, x1] | (fx * (1 - fy) == 0))
        valid &= (m[y1, x0] | ((1 - fx) * fy == 0)) & (m[y1, x1] | (fx * fy == 0))
    off = ~grid_valid
    val[off] = 0.0
    du[off] = 0.0
    dv[off] = 0.0
    return np.clip(val, 0.0, 1.0), du, dv, valid


class PoseObjective:
    """Loss and analytic gradient in the chart around ``center``."""

    def __init__(self, I_t, I_t1, D_t, D_t1, K, cfg=None, center=None, ref_flow=None):
        self.I_t, self.I_t1 = I_t, I_t1
        self.D_t, self.D_t1 = D_t, D_t1
        self.K = K
        self.cfg = cfg or LossConfig()
        self.center = center or PoseSE3.identity()
        self.ref_flow = ref_flow
        grid = pixel_grid(*D_t.shape)
        self._grid = grid
        self._X_t = self._backproject(D_t)
        self._X_t1 = self._backproject(D_t1)
        # validity masks per term; when frozen, evaluation reuses them
        self._masks: dict[str, np.ndarray] = {}
        self._frozen = False

    def _backproject(self, D: DepthMap) -> np.ndarray:
        K = self.K
        d = np.where(D.mask, D.depth, np.nan)
        g = self._grid
        return np.stack([(g[..., 0] - K.cx) * d / K.fx, (g[..., 1] - K.cy) * d / K.fy, d], axis=-1)

    def recenter(self, params) -> "PoseObjective":
        self.center = params_to_pose(params, self.center)
        return self

    def loss(self, params) -> float:
        return pose_loss(params, self.I_t, self.I_t1, self.D_t, self.D_t1, self.K, self.cfg, self.center, self.ref_flow)

    def _project(self, Y):
        K = self.K
        z = Y[..., 2]
        with np.errstate(invalid="ignore", divide="ignore"):
            u = K.fx * Y[..., 0] / z + K.cx
            v = K.fy * Y[..., 1] / z + K.cy
            valid = np.isfinite(z) & (z > 0)
            valid &= (u >= -1.0) & (u <= K.width) & (v >= -1.0) & (v <= K.height)
        return u, v, valid

    def _mask(self, key: str, mask: np.ndarray) -> np.ndarray:
        if self._frozen:
            return self._masks[key]
        self._masks[key] = mask
        return mask

    def _photometric(self, target: ImageBuffer, source: ImageBuffer, Y: np.ndarray, key: str):
        """L_pe(target, source sampled at proj(Y)) and dL/dY per pixel."""
        u, v, gvalid = self._project(Y)
        val, du, dv, valid = _sample_with_derivatives(source, u, v, gvalid)
        mask = self._mask(key, valid & target.valid)
        loss, g, n = photometric_error_grad(target.data, val, mask, self.cfg)
        gu = (g * du).sum(axis=-1)
        gv = (g * dv).sum(axis=-1)
        return loss, self._chain(gu, gv, Y, gvalid)

    def _chain(self, gu, gv, Y, gvalid):
        K = self.K
        z = np.where(gvalid, Y[..., 2], 1.0)
        x = np.where(gvalid, Y[..., 0], 0.0)
        y = np.where(gvalid, Y[..., 1], 0.0)
        gu = np.where(gvalid, gu, 0.0)
        gv = np.where(gvalid, gv, 0.0)
        gY = np.stack([gu * K.fx / z, gv * K.fy / z, -(gu * K.fx * x + gv * K.fy * y) / (z * z)], axis=-1)
        return gY

    def value_and_grad(self, params) -> tuple[float, np.ndarray]:
        params = np.asarray(params, dtype=float)
        T = params_to_pose(params, self.center)
        R, t = T.rotation_matrix, T.translation
        Jl = left_jacobian(params[:3])

        # frame t seen from t+1: Y = R X_t + t
        Y = self._X_t @ R.T + t
        loss_b, gY = self._photometric(self.I_t, self.I_t1, Y, "to_t")
        gY = np.nan_to_num(gY)
        Yc = np.nan_to_num(Y - t)
        grad = np.zeros(6)
        grad[:3] += Jl.T @ np.cross(Yc, gY).sum(axis=(0, 1))
        grad[3:] += gY.sum(axis=(0, 1))

        # frame t+1 seen from t: Y' = R^T (X_t1 - t)
        Xc = self._X_t1 - t
        Yb = Xc @ R
        loss_a, gYb = self._photometric(self.I_t1, self.I_t, Yb, "to_t1")
        gYb = np.nan_to_num(gYb)
        Rg = gYb @ R.T
        grad[:3] += Jl.T @ np.cross(Rg, np.nan_to_num(Xc)).sum(axis=(0, 1))
        grad[3:] -= Rg.sum(axis=(0, 1))

        value = loss_a + loss_b
        if self.ref_flow is not None:
            u, v, gvalid = self._project(Y)
            flow = np.stack([u, v], axis=-1) - self._grid
            joint = self._mask("flow", gvalid & self.ref_flow.mask)
            n = int(joint.sum())
            if n == 0:
                raise EmptyDomainError("flow loss needs at least one jointly valid pixel")
            diff = np.where(joint[..., None], flow - self.ref_flow.flow, 0.0)
            norm = np.sqrt((diff**2).sum(axis=-1))
            value += self.cfg.lam * float(norm[joint].mean())
            with np.errstate(invalid="ignore", divide="ignore"):
                unit = np.where((norm > 0)[..., None], diff / norm[..., None], 0.0)
            unit *= self.cfg.lam / n
            gF = np.nan_to_num(self._chain(unit[..., 0], unit[..., 1], Y, joint))
            grad[:3] += Jl.T @ np.cross(Yc, gF).sum(axis=(0, 1))
            grad[3:] += gF.sum(axis=(0, 1))
        return value, grad

    def frozen_loss(self, at) -> Callable[[np.ndarray], float]:
        """Loss with every validity mask fixed to its state at ``at``.

        The loss is piecewise smooth: it jumps whenever a pixel enters or leaves
        the valid set. The analytic gradient differentiates the smooth piece,
        so this is the function finite differences should be compared with.
        """
        self.value_and_grad(at)
        masks = dict(self._masks)

        def loss(params) -> float:
            self._masks, self._frozen = dict(masks), True
            try:
                return self.value_and_grad(params)[0]
            finally:
                self._frozen = False

        return loss

    def valid_counts(self, params) -> dict[str, int]:
        self.value_and_grad(params)
        return {k: int(m.sum()) for k, m in self._masks.items()}


def numeric_gradient(params, loss_fn, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn`` in each coordinate of ``params``."""
    if eps <= 0:
        raise ConfigError("finite-difference step must be positive")
    p = np.asarray(params, dtype=float)
    grad = np.zeros_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = eps
        hi, lo = loss_fn(p + e), loss_fn(p - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ProbeError(f"non-finite loss while probing coordinate {i}")
        grad[i] = (hi - lo) / (2 * eps)
    return grad


# ----------------------------------------------------------------------------
# descent


def _bound_step(step: np.ndarray, cfg: OptimizeConfig) -> np.ndarray:
    scale = 1.0
    nr = np.linalg.norm(step[:3])
    nt = np.linalg.norm(step[3:])
    if nr > cfg.max_rotation_step:
        scale = min(scale, cfg.max_rotation_step / nr)
    if nt > cfg.max_translation_step:
        scale = min(scale, cfg.max_translation_step / nt)
    return step * scale


def _descend(objective: PoseObjective, cfg: OptimizeConfig, losses: list[float], tolerance: float) -> str:
    """Run one stage in place, re-centering ``objective`` after each accepted step."""

    analytic = cfg.gradient == "analytic"

    def value(p):
        # the analytic path returns the gradient for free; keep it for the accepted step
        return objective.value_and_grad(p) if analytic else (objective.loss(p), None)

    def gradient_after_recenter(p, g_at_p):
        if not analytic:
            return numeric_gradient(np.zeros(6), objective.loss, cfg.fd_epsilon)
        g = g_at_p.copy()
        g[:3] = np.linalg.solve(left_jacobian(p[:3]).T, g_at_p[:3])
        return g

    zero = np.zeros(6)
    f, g = value(zero)
    if g is None:
        g = numeric_gradient(zero, objective.loss, cfg.fd_epsilon)
    if not np.isfinite(f):
        raise OptimizationError("initial loss is not finite")
    losses.append(f)
    H = None  # BFGS inverse-Hessian estimate
    bb = None  # Barzilai-Borwein step length for plain descent
    for _ in range(cfg.max_iterations):
        if np.linalg.norm(g) < cfg.grad_tolerance:
            return "converged"
        direction = None
        if cfg.method == "bfgs" and H is not None:
            direction = -H @ g
            if direction @ g >= 0:
                H = None
                direction = None
        elif cfg.method == "gd" and bb is not None:
            direction = -bb * g
        if direction is None:
            direction = _bound_step(-g / np.linalg.norm(g) * 1e6, cfg)
        direction = _bound_step(direction, cfg)
        slope = direction @ g
        step = 1.0
        accepted = False
        for attempt in range(cfg.max_halvings):
            trial = step * direction
            if attempt == 0:
                f_new, g_trial = value(trial)
            else:
                f_new, g_trial = objective.loss(trial), None
            if not np.isfinite(f_new):
                raise OptimizationError("loss became non-finite during line search")
            if f_new <= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted or not f_new < f:
            return "stalled"
        objective.recenter(trial)
        if g_trial is None and analytic:
            g_new = objective.value_and_grad(zero)[1]
        else:
            g_new = gradient_after_recenter(trial, g_trial)
        f_old, f = f, f_new
        losses.append(f)
        s, y = trial, g_new - g
        sy = s @ y
        if cfg.method == "bfgs" and sy > 1e-16:
            if H is None:
                H = np.eye(6) * (sy / (y @ y))
            rho = 1.0 / sy
            V = np.eye(6) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
        elif cfg.method == "gd":
            bb = (s @ s) / sy if sy > 1e-16 else None
        g = g_new
        if f_old - f <= tolerance * max(abs(f_old), 1e-300):
            return "converged"
    return "max_iterations"


def _blur(I: ImageBuffer, sigma: float) -> ImageBuffer:
    if sigma == 0:
        return I
    data = ndimage.gaussian_filter(I.data, sigma=(sigma, sigma, 0), mode="nearest")
    return ImageBuffer(np.clip(data, 0.0, 1.0), I.mask)


def estimate_pose(
    I_t: ImageBuffer,
    I_t1: ImageBuffer,
    D_t: DepthMap,
    D_t1: DepthMap,
    K: Intrinsics,
    init: PoseSE3 | None = None,
    cfg: OptimizeConfig | None = None,
    loss_cfg: LossConfig | None = None,
    ref_flow: FlowField | None = None,
) -> tuple[PoseSE3, OptimizeTrace]:
    """Minimize the pose loss over T (frame-t camera -> frame-t+1 camera).

    Stages run on progressively less blurred copies of the frames; the last
    stage uses the frames as given, starting from whichever of the previous
    stage's result and ``init`` scores lower on the unblurred loss, so the
    returned pose never scores worse than ``init``.
    """
    cfg = cfg or OptimizeConfig()
    loss_cfg = loss_cfg or LossConfig()
    init = init or PoseSE3.identity()
    trace = OptimizeTrace()
    current = init
    try:
        for sigma in cfg.blur_sigmas:
            A, B = _blur(I_t, sigma), _blur(I_t1, sigma)
            obj = PoseObjective(A, B, D_t, D_t1, K, loss_cfg, current, ref_flow)
            if sigma == 0 and current is not init:
                if PoseObjective(A, B, D_t, D_t1, K, loss_cfg, init, ref_flow).loss(np.zeros(6)) < obj.loss(np.zeros(6)):
                    obj.center = init
            losses: list[float] = []
            status = _descend(obj, cfg, losses, cfg.tolerance if sigma == 0 else cfg.coarse_tolerance)
            trace.stages.append((sigma, losses))
            trace.iterations += len(losses) - 1
            current = obj.center
            log.debug("blur %.1f: %d steps, loss %.6g (%s)", sigma, len(losses) - 1, losses[-1], status)
    except OptimizationError as exc:
        trace.status = "diverged"
        trace.pose = current
        exc.trace = trace
        raise
    trace.losses = trace.stages[-1][1]
    trace.status = status
    trace.pose = current
    return current, trace
