"""Synthetic rigid scenes with exact depth, pose, flow and region ground truth.

A scene is a textured background plane plus fronto-parallel textured patches
(rectangles or ellipses) placed in the frame-t camera. Frame t+1 is rendered
by ray-casting every surface after its motion (ego motion for the background,
ego motion after the object's own motion for patches) and evaluating the
texture functions at the hit points, so nothing is resampled from frame t.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SpecError
from .flow import FlowField, composite_flow, synthesize_flow
from .geometry import (
    DepthMap,
    ImageBuffer,
    Intrinsics,
    PoseSE3,
    axis_angle_to_quat,
    bilinear_taps,
    pixel_grid,
    pose_compose,
)
from .segmentation import RegionLabels

MIN_DEPTH = 0.1
MAX_DEPTH = 200.0


@dataclass(frozen=True)
class Texture:
    kind: str = "noise"  # "noise" or "checker"
    min_wavelength: float = 24.0
    max_wavelength: float = 96.0
    components: int = 8
    checker_size: float = 16.0


@dataclass(frozen=True)
class Background:
    """Plane with inverse depth (1 + tilt_x x + tilt_y y) / depth in normalized coords."""

    depth: float = 4.0
    tilt_x: float = 0.0
    tilt_y: float = 0.0


@dataclass(frozen=True)
class SceneObject:
    shape: str  # "rect" or "ellipse"
    center: tuple[float, float]  # (u, v) pixels in frame t
    size: tuple[float, float]  # (width, height) pixels in frame t
    depth: float
    motion: PoseSE3 = field(default_factory=PoseSE3.identity)


@dataclass(frozen=True)
class SceneSpec:
    K: Intrinsics
    ego: PoseSE3 = field(default_factory=PoseSE3.identity)
    background: Background = field(default_factory=Background)
    objects: tuple[SceneObject, ...] = ()
    texture: Texture = field(default_factory=Texture)
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.K.shape

    def region_poses(self) -> list[PoseSE3]:
        """Frame t -> t+1 motion of every region (0 = background)."""
        return [self.ego] + [pose_compose(self.ego, o.motion) for o in self.objects]

    def validate(self):
        bg = self.background
        if not MIN_DEPTH < bg.depth < MAX_DEPTH:
            raise SpecError(f"background depth {bg.depth} outside ({MIN_DEPTH}, {MAX_DEPTH})")
        if self.texture.kind not in ("noise", "checker"):
            raise SpecError(f"unknown texture kind {self.texture.kind!r}")
        if not 1 <= self.texture.components <= 8:
            raise SpecError("noise textures use 1 to 8 sinusoids")
        if not 0 < self.texture.min_wavelength <= self.texture.max_wavelength:
            raise SpecError("texture wavelengths must satisfy 0 < min <= max")
        if self.texture.checker_size <= 0:
            raise SpecError("checker size must be positive")
        H, W = self.shape
        for i, o in enumerate(self.objects):
            if o.shape not in ("rect", "ellipse"):
                raise SpecError(f"object {i}: unknown shape {o.shape!r}")
            if not MIN_DEPTH < o.depth < MAX_DEPTH:
                raise SpecError(f"object {i}: depth {o.depth} outside ({MIN_DEPTH}, {MAX_DEPTH})")
            (cu, cv), (w, h) = o.center, o.size
            if w <= 0 or h <= 0:
                raise SpecError(f"object {i}: size must be positive")
            if cu - w / 2 < -0.5 or cu + w / 2 > W - 0.5 or cv - h / 2 < -0.5 or cv + h / 2 > H - 0.5:
                raise SpecError(f"object {i}: footprint leaves the image")


@dataclass(eq=False)
class SceneBundle:
    spec: SceneSpec
    I_t: ImageBuffer
    I_t1: ImageBuffer
    D_t: DepthMap
    D_t1: DepthMap
    T_cam: PoseSE3
    object_poses: list[PoseSE3]
    O_gt: FlowField
    labels_gt: RegionLabels
    labels_t1: RegionLabels
    visible_t: np.ndarray  # frame-t pixels whose point is seen (same surface) in t+1
    visible_t1: np.ndarray  # frame-t+1 pixels whose point is seen in t

    @property
    def region_poses(self) -> list[PoseSE3]:
        return self.spec.region_poses()


# ----------------------------------------------------------------------------
# textures


def _noise_params(texture: Texture, rng: np.random.Generator):
    n = texture.components
    wavelengths = rng.uniform(texture.min_wavelength, texture.max_wavelength, n)
    angles = rng.uniform(0.0, np.pi, n)
    phases = rng.uniform(0.0, 2 * np.pi, n)
    weights = rng.uniform(0.5, 1.0, n)
    amps = 0.4 * weights / weights.sum()
    freqs = np.stack([np.cos(angles), np.sin(angles)], axis=1) / wavelengths[:, None]
    return freqs, phases, amps


class _TextureFn:
    """Intensity in [0.1, 0.9] as a function of 2D surface coordinates (pixel units)."""

    def __init__(self, texture: Texture, seed_key):
        self.texture = texture
        rng = np.random.default_rng(seed_key)
        self.freqs, self.phases, self.amps = _noise_params(texture, rng)
        self.offset = rng.uniform(0.0, texture.checker_size, 2)

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        if self.texture.kind == "checker":
            c = self.texture.checker_size
            parity = (np.floor((s + self.offset[0]) / c) + np.floor((t + self.offset[1]) / c)) % 2
            return np.where(parity == 0, 0.2, 0.8)
        out = np.full(np.shape(s), 0.5)
        for (fu, fv), ph, a in zip(self.freqs, self.phases, self.amps):
            out += a * np.sin(2 * np.pi * (fu * s + fv * t) + ph)
        return out


# ----------------------------------------------------------------------------
# rendering


def _surfaces(spec: SceneSpec):
    """(plane normal n with n.X = 1 in frame-t coords, frame t->t+1 pose) per surface."""
    bg = spec.background
    out = [(np.array([bg.tilt_x, bg.tilt_y, 1.0]) / bg.depth, spec.ego)]
    for pose, o in zip(spec.region_poses()[1:], spec.objects):
        out.append((np.array([0.0, 0.0, 1.0 / o.depth]), pose))
    return out


def _surface_coords(spec: SceneSpec, region: int, X: np.ndarray):
    """Texture coordinates of frame-t points on surface ``region``."""
    K = spec.K
    if region == 0:
        z0 = spec.background.depth
        return K.fx * X[..., 0] / z0, K.fy * X[..., 1] / z0
    z = spec.objects[region - 1].depth
    return K.fx * X[..., 0] / z + K.cx, K.fy * X[..., 1] / z + K.cy


def _inside(obj: SceneObject, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    (cu, cv), (w, h) = obj.center, obj.size
    du = (u - cu) / (w / 2)
    dv = (v - cv) / (h / 2)
    if obj.shape == "rect":
        return (du >= -1) & (du < 1) & (dv >= -1) & (dv < 1)
    return du * du + dv * dv <= 1


def _cast(spec: SceneSpec, poses: list[PoseSE3]):
    """Ray-cast every pixel against every surface moved by ``poses``.

    Returns the winning region id, its depth along the camera z axis, and the
    hit point expressed in frame-t coordinates.
    """
    K = spec.K
    H, W = spec.shape
    grid = pixel_grid(H, W)
    rays = np.stack([(grid[..., 0] - K.cx) / K.fx, (grid[..., 1] - K.cy) / K.fy, np.ones((H, W))], axis=-1)
    best = np.full((H, W), np.inf)
    region = np.full((H, W), -1, dtype=np.int64)
    points = np.zeros((H, W, 3))
    for r, ((n, _), pose) in enumerate(zip(_surfaces(spec), poses)):
        R = pose.rotation_matrix
        t = pose.translation
        # point in frame t: X = lam R^T ray - R^T t, constrained to n.X = 1
        nR = R @ n  # n . (R^T v) == (R n) . v
        denom = rays @ nR
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (1.0 + nR @ t) / denom
        X = lam[..., None] * (rays @ R) - (R.T @ t)
        hit = np.isfinite(lam) & (lam > 0)
        if r > 0:
            obj = spec.objects[r - 1]
            with np.errstate(invalid="ignore"):
                hit &= _inside(obj, K.fx * X[..., 0] / obj.depth + K.cx, K.fy * X[..., 1] / obj.depth + K.cy)
        win = hit & (lam < best)
        best[win] = lam[win]
        region[win] = r
        points[win] = X[win]
    return region, best, points


def _shade(spec: SceneSpec, region: np.ndarray, points: np.ndarray) -> np.ndarray:
    img = np.zeros(region.shape)
    for r in range(len(spec.objects) + 1):
        sel = region == r
        if not sel.any():
            continue
        fn = _TextureFn(spec.texture, [spec.seed, r])
        s, t = _surface_coords(spec, r, points[sel])
        img[sel] = fn(s, t)
    return img


def _visible(region_src, points_src, region_dst, pose_per_region, K: Intrinsics):
    """Pixels of the source frame whose point lands on the same surface in dst,
    with every bilinear tap in dst belonging to that surface."""
    H, W = region_src.shape
    vis = np.zeros((H, W), dtype=bool)
    for r, pose in enumerate(pose_per_region):
        sel = region_src == r
        if not sel.any():
            continue
        Y = pose.apply(points_src[sel])
        z = Y[:, 2]
        ok = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K.fx * Y[:, 0] / z + K.cx
            v = K.fy * Y[:, 1] / z + K.cy
        ok &= (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
        u = np.where(ok, u, 0.0)
        v = np.where(ok, v, 0.0)
        x0, x1, y0, y1, _, _ = bilinear_taps(u, v, H, W)
        ok &= (region_dst[y0, x0] == r) & (region_dst[y0, x1] == r)
        ok &= (region_dst[y1, x0] == r) & (region_dst[y1, x1] == r)
        vis[sel] = ok
    return vis


def generate(spec: SceneSpec) -> SceneBundle:
    spec.validate()
    K = spec.K
    n_regions = len(spec.objects) + 1
    identity = [PoseSE3.identity()] * n_regions
    poses = spec.region_poses()

    region_t, depth_t, points_t = _cast(spec, identity)
    region_t1, depth_t1, points_t1 = _cast(spec, poses)
    if np.any(region_t < 0) or np.any(region_t1 < 0):
        raise SpecError("some pixels see no surface; the background plane must fill both views")
    for D in (depth_t, depth_t1):
        if D.min() <= MIN_DEPTH or D.max() >= MAX_DEPTH:
            raise SpecError(f"rendered depths must stay within ({MIN_DEPTH}, {MAX_DEPTH}) m")
    present = np.bincount(region_t.ravel(), minlength=n_regions)
    if np.any(present == 0):
        raise SpecError("every object must be visible in frame t")
    present_t1 = np.bincount(region_t1.ravel(), minlength=n_regions)
    if np.any(present_t1 == 0):
        raise SpecError("every object must stay visible in frame t+1")

    I_t = ImageBuffer(_shade(spec, region_t, points_t))
    I_t1 = ImageBuffer(_shade(spec, region_t1, points_t1))
    D_t = DepthMap(depth_t)
    D_t1 = DepthMap(depth_t1)
    labels = RegionLabels(region_t)
    labels_t1 = RegionLabels(region_t1)

    parts = [(synthesize_flow(D_t, pose, K), labels, r) for r, pose in enumerate(poses)]
    O_gt = composite_flow(parts)

    visible_t = _visible(region_t, points_t, region_t1, poses, K)
    # frame t+1 points back into frame t: hit points are already in frame-t coords
    visible_t1 = _visible(region_t1, points_t1, region_t, identity, K)
    return SceneBundle(
        spec=spec,
        I_t=I_t,
        I_t1=I_t1,
        D_t=D_t,
        D_t1=D_t1,
        T_cam=spec.ego,
        object_poses=[o.motion for o in spec.objects],
        O_gt=O_gt,
        labels_gt=labels,
        labels_t1=labels_t1,
        visible_t=visible_t,
        visible_t1=visible_t1,
    )


# ----------------------------------------------------------------------------
# perturbations and canned scenes


def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturb_pose(T: PoseSE3, rot_deg: float, trans_m: float, seed=None) -> PoseSE3:
    """Rotate T by exactly ``rot_deg`` about a random axis and shift its
    translation by exactly ``trans_m`` in a random direction."""
    if rot_deg < 0 or trans_m < 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    axis = _unit_vector(rng)
    direction = _unit_vector(rng)
    dR = PoseSE3(axis_angle_to_quat(np.deg2rad(rot_deg) * axis))
    rotated = pose_compose(dR, PoseSE3(T.quaternion))
    return PoseSE3(rotated.quaternion, T.translation + trans_m * direction)


def default_intrinsics(height: int = 128, width: int = 256) -> Intrinsics:
    f = 0.625 * width
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def random_motion(rng: np.random.Generator, max_rot_deg: float, max_trans: float, min_trans: float = 0.0) -> PoseSE3:
    angle = np.deg2rad(rng.uniform(0.0, max_rot_deg))
    trans = rng.uniform(min_trans, max_trans)
    return PoseSE3(axis_angle_to_quat(angle * _unit_vector(rng)), trans * _unit_vector(rng))


def ego_scene_spec(
    seed: int,
    height: int = 128,
    width: int = 256,
    max_rot_deg: float = 2.0,
    max_trans: float = 0.1,
    min_trans: float = 0.0,
    texture: Texture | None = None,
) -> SceneSpec:
    """Static world (slanted textured plane) seen from a randomly moving camera."""
    rng = np.random.default_rng([seed, 7])
    bg = Background(
        depth=float(rng.uniform(3.0, 6.0)),
        tilt_x=float(rng.uniform(-0.2, 0.2)),
        tilt_y=float(rng.uniform(0.0, 0.5)),
    )
    ego = random_motion(rng, max_rot_deg, max_trans, min_trans)
    return SceneSpec(default_intrinsics(height, width), ego, bg, (), texture or Texture(), seed)


def moving_object_spec(
    seed: int,
    object_size: int = 100,
    height: int = 128,
    width: int = 256,
    shape: str = "rect",
    flow_gap: float = 10.0,
    texture: Texture | None = None,
) -> SceneSpec:
    """Camera translating sideways past a fronto-parallel backdrop while one
    patch moves the other way; background and object flows differ by
    roughly ``flow_gap`` pixels."""
    rng = np.random.default_rng([seed, 11])
    K = default_intrinsics(height, width)
    z_bg = float(rng.uniform(4.0, 6.0))
    z_obj = float(rng.uniform(2.5, 3.5))
    # background flow -fx tx / z_bg; object flow pushed by flow_gap the other way
    tx = -0.1
    ego = PoseSE3.from_translation([tx, float(rng.uniform(-0.01, 0.01)), float(rng.uniform(-0.02, 0.02))])
    bg_flow = K.fx * tx / z_bg
    sign = float(rng.choice([-1.0, 1.0]))
    obj_move = (bg_flow + sign * flow_gap) * z_obj / K.fx - tx
    motion = PoseSE3.from_translation([obj_move, float(rng.uniform(-0.02, 0.02)), 0.0])
    half = object_size / 2
    margin = 8 + abs(flow_gap) * 2
    cu = float(round(rng.uniform(half + margin, width - half - margin)))
    # at least 10 px of backdrop above and below: thinner strips vanish inside the smoothed edge band
    cv = float(round(rng.uniform(min(half + 10, height / 2), max(height - half - 10, height / 2))))
    obj = SceneObject(shape, (cu, cv), (float(object_size), float(object_size)), z_obj, motion)
    return SceneSpec(K, ego, Background(z_bg, 0.0, 0.0), (obj,), texture or Texture(), seed)


# ----------------------------------------------------------------------------
# key-value text format


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _floats(text: str, n: int, where: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split()]
    except ValueError as exc:
        raise SpecError(f"{where}: malformed number in {text!r}") from exc
    if len(vals) != n:
        raise SpecError(f"{where}: expected {n} numbers, got {len(vals)}")
    return vals


def dumps_spec(spec: SceneSpec) -> str:
    cp = configparser.ConfigParser()
    K = spec.K
    cp["scene"] = {"seed": str(spec.seed)}
    cp["camera"] = {
        "width": str(K.width),
        "height": str(K.height),
        "fx": repr(K.fx),
        "fy": repr(K.fy),
        "cx": repr(K.cx),
        "cy": repr(K.cy),
    }
    tex = spec.texture
    cp["texture"] = {
        "kind": tex.kind,
        "min_wavelength": repr(tex.min_wavelength),
        "max_wavelength": repr(tex.max_wavelength),
        "components": str(tex.components),
        "checker_size": repr(tex.checker_size),
    }
    cp["ego"] = {"quaternion": _fmt(spec.ego.quaternion), "translation": _fmt(spec.ego.translation)}
    bg = spec.background
    cp["background"] = {"depth": repr(bg.depth), "tilt_x": repr(bg.tilt_x), "tilt_y": repr(bg.tilt_y)}
    for i, o in enumerate(spec.objects):
        cp[f"object.{i}"] = {
            "shape": o.shape,
            "center": _fmt(o.center),
            "size": _fmt(o.size),
            "depth": repr(o.depth),
            "quaternion": _fmt(o.motion.quaternion),
            "translation": _fmt(o.motion.translation),
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _pose_section(sec, where: str) -> PoseSE3:
    t = _floats(sec.get("translation", "0 0 0"), 3, where + ".translation")
    if "quaternion" in sec:
        q = _floats(sec["quaternion"], 4, where + ".quaternion")
        try:
            return PoseSE3(q, t)
        except ValueError as exc:
            raise SpecError(f"{where}: {exc}") from exc
    r = _floats(sec.get("rotation_deg", "0 0 0"), 3, where + ".rotation_deg")
    return PoseSE3.from_axis_angle(np.deg2rad(r), t)


def loads_spec(text: str) -> SceneSpec:
    """Parse the INI-style scene description written by ``dumps_spec``.

    Poses may be given as ``quaternion = w x y z`` or ``rotation_deg = rx ry rz``
    (axis-angle vector in degrees), plus ``translation = tx ty tz`` in meters.
    Inline ``;`` and ``#`` comments are allowed.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))  # values never contain either
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise SpecError(f"cannot parse scene spec: {exc}") from exc
    try:
        cam = cp["camera"]
        width, height = int(cam["width"]), int(cam["height"])
        if "fx" in cam:
            K = Intrinsics(float(cam["fx"]), float(cam["fy"]), float(cam["cx"]), float(cam["cy"]), width, height)
        else:
            K = default_intrinsics(height, width)
        seed = cp.getint("scene", "seed", fallback=0)
        tsec = cp["texture"] if cp.has_section("texture") else {}
        tex = Texture(
            kind=tsec.get("kind", "noise"),
            min_wavelength=float(tsec.get("min_wavelength", 24.0)),
            max_wavelength=float(tsec.get("max_wavelength", 96.0)),
            components=int(tsec.get("components", 8)),
            checker_size=float(tsec.get("checker_size", 16.0)),
        )
        ego = _pose_section(cp["ego"], "ego") if cp.has_section("ego") else PoseSE3.identity()
        bsec = cp["background"] if cp.has_section("background") else {}
        bg = Background(float(bsec.get("depth", 4.0)), float(bsec.get("tilt_x", 0.0)), float(bsec.get("tilt_y", 0.0)))
        objects = []
        names = sorted((s for s in cp.sections() if s.startswith("object.")), key=lambda s: int(s.split(".", 1)[1]))
        for name in names:
            sec = cp[name]
            objects.append(
                SceneObject(
                    sec.get("shape", "rect"),
                    tuple(_floats(sec["center"], 2, name + ".center")),
                    tuple(_floats(sec["size"], 2, name + ".size")),
                    float(sec["depth"]),
                    _pose_section(sec, name),
                )
            )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(f"invalid scene spec: {exc}") from exc
    spec = SceneSpec(K, ego, bg, tuple(objects), tex, seed)
    spec.validate()
    return spec


def spec_digest(spec: SceneSpec) -> str:
    return hashlib.sha256(dumps_spec(spec).encode("utf-8")).hexdigest()


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)
