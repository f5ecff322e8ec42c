"""
Software rasterizer for the synthetic scene: ground-truth tri-axis maps,
shaded-cuboid query images, and the degradations applied to queries.
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics, Pose, project_axes, project_points, axis_pixel_lengths
from .exceptions import InvalidDegradation, NonPositiveDepth
from .typing import ImageSize

logger = logging.getLogger("axisforge.render")

# headlight: shading is invariant to rotations about the optical axis
LIGHT_DIR = np.array([0.0, 0.0, -1.0])
AMBIENT = 0.2

# unit cuboid faces: (outward normal, four corners in winding order)
_CUBE_FACES = []
for _axis in range(3):
    for _sign in (-1.0, 1.0):
        _n = np.zeros(3)
        _n[_axis] = _sign
        _u, _v = [a for a in range(3) if a != _axis]
        _corners = []
        for _a, _b in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            _c = np.zeros(3)
            _c[_axis] = _sign
            _c[_u] = _a
            _c[_v] = _b
            _corners.append(_c)
        _CUBE_FACES.append((_n, np.array(_corners)))


@dataclass(frozen=True)
class TriAxisImage:
    data: np.ndarray    # (height, width, 3), channel i is axis i

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def channel(self, i: int) -> np.ndarray:
        return self.data[:, :, i]


@dataclass(frozen=True)
class QueryImage:
    data: np.ndarray    # (height, width, 1)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class DegradationSpec:
    occlusion_frac: float = 0.0
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.occlusion_frac < 1.0):
            raise InvalidDegradation(
                f"occlusion_frac must be in [0, 1), got {self.occlusion_frac}")
        if self.noise_sigma < 0:
            raise InvalidDegradation(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.blur_radius < 0:
            raise InvalidDegradation(f"blur_radius must be >= 0, got {self.blur_radius}")

    @property
    def is_identity(self) -> bool:
        return self.occlusion_frac == 0 and self.noise_sigma == 0 and self.blur_radius == 0

    def to_record(self):
        return {"occlusion_frac": self.occlusion_frac, "noise_sigma": self.noise_sigma,
                "blur_radius": self.blur_radius, "seed": self.seed}

    @classmethod
    def from_record(cls, rec) -> "DegradationSpec":
        return cls(float(rec["occlusion_frac"]), float(rec["noise_sigma"]),
                   float(rec["blur_radius"]), int(rec["seed"]))


def _size(size: ImageSize) -> Tuple[int, int]:
    if isinstance(size, (tuple, list)):
        width, height = size
        return int(width), int(height)
    return int(size), int(size)


def _pixel_grid(width: int, height: int):
    v, u = np.mgrid[0:height, 0:width].astype(float)
    return u, v


def _segment_distance(u, v, p0, p1) -> np.ndarray:
    d = p1 - p0
    denom = float(d @ d)
    t = ((u - p0[0]) * d[0] + (v - p0[1]) * d[1]) / denom
    t = np.clip(t, 0.0, 1.0)
    du = u - (p0[0] + t * d[0])
    dv = v - (p0[1] + t * d[1])
    return np.hypot(du, dv)


def render_triaxis(K: CameraIntrinsics, pose: Pose, axis_len: float = 1.0,
                   thickness_px: float = 2.0, size: ImageSize = None) -> TriAxisImage:
    """
    Channel i holds the segment from the projected origin to the projected
    end of object axis i: intensity 1 within thickness/2 of the segment,
    falling linearly to 0 over the next pixel.
    """
    width, height = _size(size) if size is not None else (K.width, K.height)

    lines = project_axes(K, pose, axis_len)
    lengths = axis_pixel_lengths(K, pose, axis_len)
    u, v = _pixel_grid(width, height)

    core = 0.5 * thickness_px
    data = np.zeros((height, width, 3))
    for i in range(3):
        p0 = lines.origin_px
        p1 = p0 + lengths[i] * lines.dir[i]
        dist = _segment_distance(u, v, p0, p1)
        data[:, :, i] = np.clip(core + 1.0 - dist, 0.0, 1.0)

    return TriAxisImage(data)


def _edge_coverage(u, v, poly: np.ndarray) -> np.ndarray:
    """Anti-aliased coverage of a convex polygon: signed distance to the
    nearest edge, clipped to a one-pixel ramp."""
    area2 = 0.0
    n = len(poly)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        area2 += a[0] * b[1] - b[0] * a[1]
    orient = 1.0 if area2 > 0 else -1.0

    inside = np.full(u.shape, np.inf)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        e = b - a
        length = np.hypot(e[0], e[1])
        if length == 0:
            continue
        # positive on the interior side
        sd = orient * (e[0] * (v - a[1]) - e[1] * (u - a[0])) / length
        inside = np.minimum(inside, sd)
    return np.clip(inside + 0.5, 0.0, 1.0)


def shade_faces(pose: Pose, light_dir=LIGHT_DIR) -> List[Tuple[float, float, np.ndarray]]:
    """(distance, shade, object-frame corners) of every front-facing cuboid face."""
    light_dir = np.asarray(light_dir, dtype=float)
    faces = []
    for normal, corners in _CUBE_FACES:
        cam_corners = pose.transform(corners)
        if np.any(cam_corners[:, 2] <= 0):
            raise NonPositiveDepth("the cuboid is not fully in front of the camera")
        n_cam = pose.R @ normal
        center = cam_corners.mean(axis=0)
        if n_cam @ center >= 0:
            continue  # back face
        shade = AMBIENT + (1.0 - AMBIENT) * max(0.0, float(n_cam @ light_dir))
        faces.append((float(np.linalg.norm(center)), shade, corners))
    return faces


def render_query(K: CameraIntrinsics, pose: Pose, size: ImageSize = None,
                 light_dir=LIGHT_DIR) -> QueryImage:
    """Lambertian unit cuboid, painter's algorithm over the visible faces."""
    width, height = _size(size) if size is not None else (K.width, K.height)
    u, v = _pixel_grid(width, height)

    data = np.zeros((height, width))
    # far to near
    for _, shade, corners in sorted(shade_faces(pose, light_dir), key=lambda f: -f[0]):
        poly = project_points(K, pose, corners)
        cov = _edge_coverage(u, v, poly)
        data = data * (1.0 - cov) + shade * cov

    return QueryImage(np.clip(data, 0.0, 1.0)[:, :, None])


def apply_degradation(img: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Occlude, then add clamped Gaussian noise, then box blur. Same shape out."""
    out = np.array(img, dtype=float, copy=True)
    if spec.is_identity:
        return out

    rng = np.random.default_rng(spec.seed)
    height, width = out.shape[:2]

    if spec.occlusion_frac > 0:
        area = spec.occlusion_frac * width * height
        aspect = rng.uniform(0.5, 2.0)
        w = int(np.clip(np.round(np.sqrt(area * aspect)), 1, width))
        h = int(np.clip(np.round(area / w), 1, height))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        out[y0:y0 + h, x0:x0 + w] = 0.0

    if spec.noise_sigma > 0:
        out = np.clip(out + rng.normal(0.0, spec.noise_sigma, out.shape), 0.0, 1.0)

    radius = int(round(spec.blur_radius))
    if radius > 0:
        k = 2 * radius + 1
        box = (k, k) + (1,) * (out.ndim - 2)
        out = ndimage.uniform_filter(out, size=box, mode="nearest")

    return out
