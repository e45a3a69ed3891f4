"""Pinhole camera, rigid poses, reprojection and bilinear inverse warping.

Pose convention used throughout the package: a ``PoseSE3`` handed to
``reproject_coords`` / ``warp_image`` maps 3D points expressed in the camera
frame of the depth map (the frame whose pixels are being synthesized) into the
camera frame of the image that is sampled. With ``T`` the motion taking
frame-t camera coordinates to frame-t+1 camera coordinates::

    warp_image(I_t1, D_t, T, K)            # frame t synthesized from t+1
    warp_image(I_t, D_t1, T.inverse(), K)  # frame t+1 synthesized from t
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DomainError, ShapeError

QUAT_TOL = 1e-9
# coordinates this close outside the image rectangle count as inside (round-off)
EDGE_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be at least 1x1, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, sx: float, sy: float, width: int | None = None, height: int | None = None) -> "Intrinsics":
        """Intrinsics for an image resized by (sx, sy)."""
        return Intrinsics(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width if width is not None else max(1, int(round(self.width * sx))),
            height if height is not None else max(1, int(round(self.height * sy))),
        )


# ----------------------------------------------------------------------------
# rotations


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def axis_angle_to_quat(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-8:
        # second-order Taylor expansion keeps the map smooth at zero
        q = np.array([1.0 - theta**2 / 8.0, *(0.5 - theta**2 / 48.0) * w])
    else:
        q = np.array([np.cos(theta / 2), *(np.sin(theta / 2) / theta) * w])
    return q / np.linalg.norm(q)


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        return 2.0 * q[1:] / q[0]
    theta = 2.0 * np.arctan2(s, q[0])
    return q[1:] * (theta / s)


def left_jacobian(w) -> np.ndarray:
    """Left Jacobian of SO(3): exp(w + d) ~= exp(J d) exp(w)."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * (W @ W)
    )


# ----------------------------------------------------------------------------
# poses


class PoseSE3:
    """Rigid transform x -> R x + t with R stored as a unit quaternion (w, x, y, z)."""

    __slots__ = ("_q", "_t")

    def __init__(self, rotation=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        q = np.asarray(rotation, dtype=float).reshape(4)
        t = np.asarray(translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise DomainError("pose contains non-finite values")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise DomainError(f"rotation quaternion must have unit norm, got {n}")
        q = q / n
        if q[0] < 0:
            q = -q
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        self._q = q
        self._t = t

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "PoseSE3":
        return cls(translation=t)

    @classmethod
    def from_axis_angle(cls, w, t=(0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls(axis_angle_to_quat(w), t)

    @classmethod
    def from_matrix(cls, M) -> "PoseSE3":
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @property
    def quaternion(self) -> np.ndarray:
        return self._q

    @property
    def translation(self) -> np.ndarray:
        return self._t

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self._q)

    @property
    def axis_angle(self) -> np.ndarray:
        return quat_to_axis_angle(self._q)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix
        M[:3, 3] = self._t
        return M

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return pose_compose(self, other)

    def inverse(self) -> "PoseSE3":
        return pose_invert(self)

    def apply(self, X) -> np.ndarray:
        return pose_apply(self, X)

    def rotation_angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return 2.0 * float(np.arctan2(np.linalg.norm(self._q[1:]), abs(self._q[0])))

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self._q)
        t = ", ".join(f"{v:.6g}" for v in self._t)
        return f"PoseSE3(q=[{q}], t=[{t}])"


def pose_compose(A: PoseSE3, B: PoseSE3) -> PoseSE3:
    """A after B: x -> A(B(x))."""
    q = quat_multiply(A.quaternion, B.quaternion)
    t = A.rotation_matrix @ B.translation + A.translation
    return PoseSE3(q / np.linalg.norm(q), t)


def pose_invert(A: PoseSE3) -> PoseSE3:
    qi = A.quaternion * np.array([1.0, -1.0, -1.0, -1.0])
    return PoseSE3(qi, -(quat_to_matrix(qi) @ A.translation))


def pose_apply(A: PoseSE3, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X @ A.rotation_matrix.T + A.translation


def rotation_distance(A: PoseSE3, B: PoseSE3) -> float:
    """Angle in radians of the relative rotation between A and B."""
    return pose_compose(pose_invert(A), B).rotation_angle()


# ----------------------------------------------------------------------------
# rasters


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Intensities in [0, 1] stored as (H, W, C) with an optional (H, W) validity mask."""

    data: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ShapeError(f"image must be (H, W) or (H, W, C), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DomainError("image intensities must be finite")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise DomainError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", data)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != data.shape[:2]:
                raise ShapeError(f"mask shape {mask.shape} != image shape {data.shape[:2]}")
            object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def valid(self) -> np.ndarray:
        return np.ones(self.shape, dtype=bool) if self.mask is None else self.mask


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth in meters; invalid pixels are excluded everywhere."""

    depth: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=float)
        if depth.ndim != 2:
            raise ShapeError(f"depth map must be 2D, got {depth.shape}")
        with np.errstate(invalid="ignore"):
            usable = np.isfinite(depth) & (depth > 0)
        if self.mask is None:
            mask = usable
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != depth.shape:
                raise ShapeError(f"mask shape {mask.shape} != depth shape {depth.shape}")
            if np.any(mask & ~usable):
                raise DomainError("valid depths must be finite and strictly positive")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True, eq=False)
class PixelGrid:
    """Continuous target coordinates (u, v) per pixel; invalid entries hold NaN."""

    coords: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if coords.ndim != 3 or coords.shape[2] != 2 or mask.shape != coords.shape[:2]:
            raise ShapeError(f"grid must be (H, W, 2) with (H, W) mask, got {coords.shape}, {mask.shape}")
        coords[~mask] = np.nan
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.coords.shape[:2]

    @classmethod
    def identity(cls, height: int, width: int) -> "PixelGrid":
        return cls(pixel_grid(height, width), np.ones((height, width), dtype=bool))


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Integer pixel coordinates as an (H, W, 2) array of (u, v)."""
    v, u = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([u, v], axis=-1)


# ----------------------------------------------------------------------------
# pinhole model


def backproject(p, d, K: Intrinsics) -> np.ndarray:
    """Lift pixel(s) ``p`` = (u, v) at depth ``d`` to camera-frame 3D point(s)."""
    p = np.asarray(p, dtype=float)
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise DomainError("depth must be finite and strictly positive")
    x = (p[..., 0] - K.cx) * d / K.fx
    y = (p[..., 1] - K.cy) * d / K.fy
    return np.stack(np.broadcast_arrays(x, y, d), axis=-1)


def project_point(X, K: Intrinsics) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("point is on or behind the camera plane")
    return np.stack([K.fx * X[..., 0] / z + K.cx, K.fy * X[..., 1] / z + K.cy], axis=-1)


def _check_dims(shape, K: Intrinsics, what: str):
    if tuple(shape) != K.shape:
        raise ShapeError(f"{what} is {shape[0]}x{shape[1]} but intrinsics describe {K.height}x{K.width}")


def transformed_points(D: DepthMap, T: PoseSE3, K: Intrinsics) -> np.ndarray:
    """Points of every pixel after applying T; NaN where depth is invalid."""
    _check_dims(D.shape, K, "depth map")
    grid = pixel_grid(*D.shape)
    d = np.where(D.mask, D.depth, np.nan)
    X = np.stack(
        [(grid[..., 0] - K.cx) * d / K.fx, (grid[..., 1] - K.cy) * d / K.fy, d], axis=-1
    )
    return X @ T.rotation_matrix.T + T.translation


def reproject_coords(D: DepthMap, T: PoseSE3, K: Intrinsics) -> PixelGrid:
    """Where each pixel of ``D`` lands in the other camera after ``T``."""
    Y = transformed_points(D, T, K)
    z = Y[..., 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        u = K.fx * Y[..., 0] / z + K.cx
        v = K.fy * Y[..., 1] / z + K.cy
        valid = D.mask & (z > 0)
        valid &= (u >= -1.0) & (u <= K.width) & (v >= -1.0) & (v <= K.height)
    return PixelGrid(np.stack([u, v], axis=-1), valid)


def bilinear_taps(u: np.ndarray, v: np.ndarray, height: int, width: int):
    """Clamped cell corners and fractional offsets for bilinear lookup.

    The cell is always an interior one (x0 <= W - 2), so a coordinate sitting
    on the last row/column interpolates with weight 1 on the far corner.
    """
    uc = np.clip(u, 0.0, width - 1.0)
    vc = np.clip(v, 0.0, height - 1.0)
    x0 = np.clip(np.floor(uc), 0, max(width - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(vc), 0, max(height - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    return x0, x1, y0, y1, uc - x0, vc - y0


def sample_bilinear(I: ImageBuffer, G: PixelGrid) -> ImageBuffer:
    """Bilinear lookup of ``I`` at the grid coordinates.

    Out-of-rectangle coordinates are clamped for interpolation and flagged
    invalid. When ``I`` carries a mask, every tap with non-zero weight must be
    valid too.
    """
    if I.shape != G.shape:
        raise ShapeError(f"image {I.shape} and grid {G.shape} differ")
    H, W = I.shape
    u = np.where(G.mask, G.coords[..., 0], 0.0)
    v = np.where(G.mask, G.coords[..., 1], 0.0)
    x0, x1, y0, y1, fx, fy = bilinear_taps(u, v, H, W)
    data = I.data
    w00 = ((1 - fx) * (1 - fy))[..., None]
    w01 = (fx * (1 - fy))[..., None]
    w10 = ((1 - fx) * fy)[..., None]
    w11 = (fx * fy)[..., None]
    out = w00 * data[y0, x0] + w01 * data[y0, x1] + w10 * data[y1, x0] + w11 * data[y1, x1]
    valid = G.mask & (u >= -EDGE_TOL) & (u <= W - 1 + EDGE_TOL) & (v >= -EDGE_TOL) & (v <= H - 1 + EDGE_TOL)
    if I.mask is not None:
        m = I.mask
        taps_ok = (
            (m[y0, x0] | (w00[..., 0] == 0))
            & (m[y0, x1] | (w01[..., 0] == 0))
            & (m[y1, x0] | (w10[..., 0] == 0))
            & (m[y1, x1] | (w11[..., 0] == 0))
        )
        valid &= taps_ok
    out[~G.mask] = 0.0
    return ImageBuffer(np.clip(out, 0.0, 1.0), valid)


def warp_image(I_src: ImageBuffer, D: DepthMap, T: PoseSE3, K: Intrinsics) -> ImageBuffer:
    """Synthesize the view of ``D``'s camera by sampling ``I_src`` (see module docstring)."""
    return sample_bilinear(I_src, reproject_coords(D, T, K))
