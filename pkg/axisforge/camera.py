"""
Pinhole camera model and the forward projection of an object's tri-axis.

Pixel coordinates are (u, v) = (column, row) with pixel centers on integers,
the convention shared by the renderer and the extractors.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import (
    AXIS_NAMES, DegenerateAxis, InvalidIntrinsics, InvalidPose, NonPositiveDepth,
)
from .typing import Mat3, Vec2, Vec3

logger = logging.getLogger("axisforge.camera")

MIN_DEPTH = 1e-9
MIN_AXIS_PX = 1e-6
ROTATION_TOL = 1e-9

INTRINSICS_KEYS = ("f_x", "f_y", "gamma", "c_x", "c_y", "width", "height")


@dataclass(frozen=True)
class CameraIntrinsics:
    f_x: float
    f_y: float
    gamma: float
    c_x: float
    c_y: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise InvalidIntrinsics(
                f"focal lengths must be positive, got f_x={self.f_x}, f_y={self.f_y}")
        if not (self.width > 0 and self.height > 0):
            raise InvalidIntrinsics(
                f"image size must be positive, got {self.width}x{self.height}")

    @classmethod
    def reference(cls, size: int = 128) -> "CameraIntrinsics":
        """f = 100 at 128 px, scaled with the image, principal point centered."""
        f = 100.0 * size / 128.0
        c = size / 2.0
        return cls(f, f, 0.0, c, c, size, size)

    @property
    def matrix(self) -> Mat3:
        return np.array([
            [self.f_x, self.gamma, self.c_x],
            [0.0, self.f_y, self.c_y],
            [0.0, 0.0, 1.0],
        ])

    @property
    def inverse(self) -> Mat3:
        # closed form of the upper-triangular inverse
        fx, fy, g, cx, cy = self.f_x, self.f_y, self.gamma, self.c_x, self.c_y
        return np.array([
            [1.0 / fx, -g / (fx * fy), (g * cy - cx * fy) / (fx * fy)],
            [0.0, 1.0 / fy, -cy / fy],
            [0.0, 0.0, 1.0],
        ])

    def back_project(self, px) -> Vec3:
        """Ray K^-1 x through a pixel, with unit depth."""
        px = np.asarray(px, dtype=float)
        return self.inverse @ np.array([px[0], px[1], 1.0])

    def to_record(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in INTRINSICS_KEYS}

    @classmethod
    def from_record(cls, rec: Dict[str, float]) -> "CameraIntrinsics":
        missing = [k for k in INTRINSICS_KEYS if k not in rec]
        if missing:
            raise InvalidIntrinsics(f"missing intrinsics keys: {', '.join(missing)}")
        return cls(float(rec["f_x"]), float(rec["f_y"]), float(rec["gamma"]),
                   float(rec["c_x"]), float(rec["c_y"]),
                   int(rec["width"]), int(rec["height"]))


@dataclass(frozen=True)
class Pose:
    R: Mat3
    T: Vec3

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        T = np.array(self.T, dtype=float).reshape(-1)
        if R.shape != (3, 3) or T.shape != (3,):
            raise InvalidPose(f"expected 3x3 R and 3-vector T, got {R.shape}, {T.shape}")

        ortho_err = np.linalg.norm(R.T @ R - np.eye(3))
        det = np.linalg.det(R)
        if ortho_err > ROTATION_TOL or abs(det - 1.0) > ROTATION_TOL:
            raise InvalidPose(
                f"R is not a rotation (|RtR - I| = {ortho_err:.3g}, det = {det:.12f})")

        R.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    def transform(self, points) -> np.ndarray:
        """Object frame -> camera frame, for one point or an (N, 3) array."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.T

    def to_record(self) -> List[float]:
        """12 scalars: row-major R, then T."""
        return [float(v) for v in self.R.reshape(-1)] + [float(v) for v in self.T]

    @classmethod
    def from_record(cls, values: Sequence[float]) -> "Pose":
        values = np.asarray(values, dtype=float)
        if values.shape != (12,):
            raise InvalidPose(f"a pose record has 12 scalars, got {values.shape}")
        return cls(values[:9].reshape(3, 3), values[9:])


@dataclass(frozen=True)
class Omega:
    """Image of the absolute conic, K^-T K^-1."""
    m: Mat3

    def is_valid(self, tol: float = 1e-12) -> bool:
        m = np.asarray(self.m, dtype=float)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            return False
        scale = max(1.0, float(np.abs(m).max()))
        if np.abs(m - m.T).max() > tol * scale:
            return False
        return bool(np.all(np.linalg.eigvalsh(0.5 * (m + m.T)) > 0))

    def form(self, a, b) -> float:
        return float(np.asarray(a) @ self.m @ np.asarray(b))


@dataclass(frozen=True)
class AxisLines:
    origin_px: Vec2
    dir: np.ndarray = field(repr=False)   # (3, 2), rows are X, Y, Z

    @property
    def slope(self) -> np.ndarray:
        d = np.asarray(self.dir)
        out = np.full(3, np.inf)
        ok = np.abs(d[:, 0]) > 1e-12
        out[ok] = d[ok, 1] / d[ok, 0]
        return out


def rot_x(deg: float) -> Mat3:
    return Rotation.from_euler("x", deg, degrees=True).as_matrix()


def rot_y(deg: float) -> Mat3:
    return Rotation.from_euler("y", deg, degrees=True).as_matrix()


def rot_z(deg: float) -> Mat3:
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


def random_rotation(rng: np.random.Generator) -> Mat3:
    """Uniform on SO(3) (Haar measure)."""
    return Rotation.random(random_state=rng).as_matrix()


def project_points(K: CameraIntrinsics, pose: Pose, points) -> np.ndarray:
    """Project an (N, 3) array of object-frame points to (N, 2) pixels."""
    cam = pose.transform(np.atleast_2d(points))
    depth = cam[:, 2]
    if np.any(depth <= MIN_DEPTH):
        bad = float(depth.min())
        raise NonPositiveDepth(f"point at depth {bad:.6g} is at or behind the camera")

    h = cam @ K.matrix.T
    return h[:, :2] / h[:, 2:3]


def project_point(K: CameraIntrinsics, pose: Pose, X_obj) -> Vec2:
    return project_points(K, pose, np.asarray(X_obj, dtype=float).reshape(1, 3))[0]


def compute_omega(K: CameraIntrinsics) -> Omega:
    Kinv = K.inverse
    m = Kinv.T @ Kinv
    return Omega(0.5 * (m + m.T))


def _axis_endpoints(axis_len: float) -> np.ndarray:
    return np.vstack([np.zeros(3), axis_len * np.eye(3)])


def project_axes(K: CameraIntrinsics, pose: Pose, axis_len: float = 1.0) -> AxisLines:
    if axis_len <= 0:
        raise ValueError(f"axis_len must be positive, got {axis_len}")

    px = project_points(K, pose, _axis_endpoints(axis_len))
    origin = px[0]
    dirs = np.empty((3, 2))
    for i in range(3):
        delta = px[i + 1] - origin
        length = np.hypot(delta[0], delta[1])
        if length < MIN_AXIS_PX:
            raise DegenerateAxis(
                i, f"projects to {length:.3g} px, aligned with the viewing ray")
        dirs[i] = delta / length

    return AxisLines(origin_px=origin, dir=dirs)


def axis_pixel_lengths(K: CameraIntrinsics, pose: Pose, axis_len: float = 1.0) -> np.ndarray:
    px = project_points(K, pose, _axis_endpoints(axis_len))
    return np.linalg.norm(px[1:] - px[0], axis=1)


def describe_axes(lines: AxisLines) -> str:
    parts = [f"{name}({d[0]:+.3f},{d[1]:+.3f})" for name, d in zip(AXIS_NAMES, lines.dir)]
    return f"origin=({lines.origin_px[0]:.2f},{lines.origin_px[1]:.2f}) " + " ".join(parts)
