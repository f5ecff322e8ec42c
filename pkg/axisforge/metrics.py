"""
Pose accuracy: ADD, mean reprojection error, rotation geodesic, and the
success-rate aggregation reported per benchmark run.

Thresholds are strict: a sample passes ADD when value < 0.2 d and
reprojection when value < 15 px.
"""
import csv
import io
import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraIntrinsics, Pose, project_points

logger = logging.getLogger("axisforge.metrics")

SUMMARY_COLUMNS = (
    "n", "n_failed", "n_missing", "add_rate", "reproj_rate",
    "median_rot_deg", "median_trans_err", "median_add", "median_reproj_px",
)


@dataclass(frozen=True)
class ModelPoints:
    points: np.ndarray
    diameter: float

    @classmethod
    def from_points(cls, points) -> "ModelPoints":
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) < 8:
            raise ValueError("model points must be at least 8 3-vectors")
        diameter = max(float(np.linalg.norm(a - b)) for a, b in combinations(points, 2))
        return cls(points, diameter)

    @classmethod
    def cuboid(cls, half_extent: float = 1.0) -> "ModelPoints":
        """8 corners and 6 face centers of the axis-aligned cuboid."""
        h = half_extent
        corners = [(x, y, z) for x in (-h, h) for y in (-h, h) for z in (-h, h)]
        faces = [tuple(s * h * e) for e in np.eye(3) for s in (-1.0, 1.0)]
        return cls.from_points(np.array(corners + faces))


@dataclass(frozen=True)
class Thresholds:
    add_frac: float = 0.2
    reproj_px: float = 15.0


def add_metric(gt: Pose, pred: Pose, model: ModelPoints) -> float:
    diff = gt.transform(model.points) - pred.transform(model.points)
    return float(np.linalg.norm(diff, axis=1).mean())


def reproj_metric(gt: Pose, pred: Pose, model: ModelPoints, K: CameraIntrinsics) -> float:
    a = project_points(K, gt, model.points)
    b = project_points(K, pred, model.points)
    return float(np.linalg.norm(a - b, axis=1).mean())


def rotation_geodesic(R1, R2) -> float:
    """Angle of R1^T R2 in degrees."""
    rel = Rotation.from_matrix(np.asarray(R1).T @ np.asarray(R2))
    return float(np.degrees(rel.magnitude()))


def translation_error(gt: Pose, pred: Pose) -> float:
    return float(np.linalg.norm(gt.T - pred.T))


@dataclass(frozen=True)
class SampleMetrics:
    id: str
    rot_deg: Optional[float] = None
    trans_err: Optional[float] = None
    add: Optional[float] = None
    reproj_px: Optional[float] = None
    add_pass: bool = False
    reproj_pass: bool = False
    error: Optional[str] = None

    def to_record(self) -> Dict:
        return {
            "id": self.id, "rot_deg": self.rot_deg, "trans_err": self.trans_err,
            "add": self.add, "reproj_px": self.reproj_px,
            "add_pass": self.add_pass, "reproj_pass": self.reproj_pass,
            "error": self.error,
        }

    @classmethod
    def from_record(cls, rec: Dict) -> "SampleMetrics":
        return cls(**{k: rec.get(k) for k in cls.__dataclass_fields__})


def _median(values: List[float]) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


@dataclass
class MetricsReport:
    records: List[SampleMetrics]
    n_missing: int = 0
    aggregates: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self.recompute()

    def recompute(self) -> Dict:
        n = len(self.records)
        failed = sum(1 for r in self.records if r.error is not None)
        return {
            "n": n,
            "n_failed": failed,
            "n_missing": self.n_missing,
            "add_rate": sum(r.add_pass for r in self.records) / n if n else 0.0,
            "reproj_rate": sum(r.reproj_pass for r in self.records) / n if n else 0.0,
            "median_rot_deg": _median([r.rot_deg for r in self.records]),
            "median_trans_err": _median([r.trans_err for r in self.records]),
            "median_add": _median([r.add for r in self.records]),
            "median_reproj_px": _median([r.reproj_px for r in self.records]),
        }

    def to_records(self) -> List[Dict]:
        return [r.to_record() for r in self.records]

    @classmethod
    def from_records(cls, records: Sequence[Dict], n_missing: int = 0) -> "MetricsReport":
        return cls([SampleMetrics.from_record(r) for r in records], n_missing)

    def summary_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerow(["" if self.aggregates[c] is None else self.aggregates[c]
                         for c in SUMMARY_COLUMNS])
        return buf.getvalue()


def evaluate_pair(sample_id: str, gt: Pose, pred: Pose, model: ModelPoints,
                  K: CameraIntrinsics, thresholds: Thresholds) -> SampleMetrics:
    add = add_metric(gt, pred, model)
    reproj = reproj_metric(gt, pred, model, K)
    return SampleMetrics(
        id=sample_id,
        rot_deg=rotation_geodesic(gt.R, pred.R),
        trans_err=translation_error(gt, pred),
        add=add,
        reproj_px=reproj,
        add_pass=add < thresholds.add_frac * model.diameter,
        reproj_pass=reproj < thresholds.reproj_px,
    )


def evaluate_suite(records: Sequence[Tuple], model: ModelPoints, K: CameraIntrinsics,
                   thresholds: Thresholds = None) -> MetricsReport:
    """
    `records` holds (gt, pred) or (id, gt, pred) tuples; pred may be None or
    an error string for a failed prediction, which counts as failing both
    metrics. Output order follows input order.
    """
    if not records:
        raise ValueError("evaluate_suite needs at least one record")
    thresholds = thresholds or Thresholds()

    out = []
    for k, rec in enumerate(records):
        if len(rec) == 2:
            sample_id, (gt, pred) = str(k), rec
        else:
            sample_id, gt, pred = rec
        if not isinstance(pred, Pose):
            out.append(SampleMetrics(id=sample_id, error=str(pred or "no prediction")))
            continue
        out.append(evaluate_pair(sample_id, gt, pred, model, K, thresholds))

    return MetricsReport(out)


def paired_delta(guided: MetricsReport, baseline: MetricsReport) -> Dict:
    """Rate and median differences of two runs over the same records."""
    keys = ("add_rate", "reproj_rate", "median_rot_deg", "median_add", "median_reproj_px")
    delta = {}
    for key in keys:
        a, b = guided.aggregates.get(key), baseline.aggregates.get(key)
        delta[key] = None if a is None or b is None else a - b

    base = {r.id: r for r in baseline.records}
    both = [(r, base[r.id]) for r in guided.records if r.id in base]
    delta["n_paired"] = len(both)
    delta["reproj_gained"] = sum(1 for a, b in both if a.reproj_pass and not b.reproj_pass)
    delta["reproj_lost"] = sum(1 for a, b in both if b.reproj_pass and not a.reproj_pass)
    return delta
