"""
Synthetic benchmark generation and the dataset manifest.

A dataset directory holds `manifest.json` and `images/`; images are raw
little-endian float32 buffers referenced by relative path.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .camera import (
    CameraIntrinsics, Pose, axis_pixel_lengths, describe_axes, project_axes,
    project_points, random_rotation,
)
from .config import RenderConfig, RunConfig
from .exceptions import (
    DegenerateAxis, DegenerateSamplingExhausted, ExtractionError, IoError,
    NonPositiveDepth, PipelineError,
)
from .extraction import AxisObservation, extract_axes_soft
from .render import (
    DegradationSpec, TriAxisImage, QueryImage, apply_degradation,
    render_query, render_triaxis,
)
from .utils import (
    check_record_id, derive_seed, dump_json, export_ppm, load_json,
    read_raw_image, worker_count, write_raw_image,
)

logger = logging.getLogger("axisforge.dataset")

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA = 1
MAX_REJECTIONS = 1000


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    split: str
    pose: Pose
    intrinsics: CameraIntrinsics
    query_path: str
    triaxis_path: str
    degraded_path: str
    degradation: DegradationSpec
    seed: int
    target: AxisObservation

    def to_record(self) -> Dict:
        return {
            "id": self.id,
            "split": self.split,
            "pose": self.pose.to_record(),
            "intrinsics": self.intrinsics.to_record(),
            "query": self.query_path,
            "triaxis": self.triaxis_path,
            "degraded": self.degraded_path,
            "degradation": self.degradation.to_record(),
            "seed": self.seed,
            "target": self.target.to_record(),
        }

    @classmethod
    def from_record(cls, rec: Dict) -> "DatasetRecord":
        check_record_id(rec["id"])
        return cls(
            id=rec["id"],
            split=rec["split"],
            pose=Pose.from_record(rec["pose"]),
            intrinsics=CameraIntrinsics.from_record(rec["intrinsics"]),
            query_path=rec["query"],
            triaxis_path=rec["triaxis"],
            degraded_path=rec["degraded"],
            degradation=DegradationSpec.from_record(rec["degradation"]),
            seed=int(rec["seed"]),
            target=AxisObservation.from_vector(rec["target"]),
        )


@dataclass
class Dataset:
    root: Path
    config: RunConfig
    records: List[DatasetRecord]

    def split(self, name: str) -> List[DatasetRecord]:
        return [r for r in self.records if r.split == name]

    def get(self, record_id: str) -> Optional[DatasetRecord]:
        for r in self.records:
            if r.id == record_id:
                return r
        return None

    def _image(self, rel: str, rec: DatasetRecord, channels: int) -> np.ndarray:
        K = rec.intrinsics
        return read_raw_image(self.root / rel, (K.height, K.width, channels))

    def triaxis(self, rec: DatasetRecord) -> TriAxisImage:
        return TriAxisImage(self._image(rec.triaxis_path, rec, 3))

    def query(self, rec: DatasetRecord, degraded: bool = True) -> QueryImage:
        rel = rec.degraded_path if degraded else rec.query_path
        return QueryImage(self._image(rel, rec, 1))


def _pose_accepted(K: CameraIntrinsics, pose: Pose, render: RenderConfig) -> bool:
    try:
        project_axes(K, pose, render.axis_len)
        lengths = axis_pixel_lengths(K, pose, render.axis_len)
        ends = project_points(K, pose, np.vstack([np.zeros(3), render.axis_len * np.eye(3)]))
        corners = pose.transform(np.array([(x, y, z) for x in (-1, 1)
                                           for y in (-1, 1) for z in (-1, 1)], dtype=float))
    except (DegenerateAxis, NonPositiveDepth):
        return False

    if lengths.min() < render.min_axis_px:
        return False
    if np.any(corners[:, 2] <= 0):
        return False
    inside = (ends >= 0).all() and (ends[:, 0] <= K.width - 1).all() and (ends[:, 1] <= K.height - 1).all()
    return bool(inside)


def sample_pose(rng: np.random.Generator, K: CameraIntrinsics, render: RenderConfig) -> Pose:
    """Rotation uniform on SO(3), depth uniform in the configured band;
    rejects poses whose axes are image-degenerate or leave the image."""
    for _ in range(MAX_REJECTIONS):
        z = rng.uniform(render.depth_min, render.depth_max)
        x, y = rng.uniform(-render.lateral, render.lateral, size=2) * z
        pose = Pose(random_rotation(rng), np.array([x, y, z]))
        if _pose_accepted(K, pose, render):
            return pose

    raise DegenerateSamplingExhausted(
        f"{MAX_REJECTIONS} consecutive poses rejected; widen the depth band or lower min_axis_px")


def observation_target(K: CameraIntrinsics, pose: Pose, triaxis: TriAxisImage,
                       render: RenderConfig, sharpness: float) -> AxisObservation:
    """The measurement the soft extractor reads off the clean render."""
    try:
        return extract_axes_soft(triaxis, sharpness)
    except ExtractionError as exc:
        logger.warning("soft extraction failed on a clean render (%s), using exact axes", exc)
        return AxisObservation.from_lines(project_axes(K, pose, render.axis_len))


def _render_record(root: Path, config: RunConfig, split: str, index: int) -> DatasetRecord:
    render = config.render
    record_id = f"{split}-{index:05d}"
    seed = derive_seed(config.seeds.seed, "record", record_id)
    rng = np.random.default_rng(seed)

    K = render.intrinsics()
    pose = sample_pose(rng, K, render)
    logger.debug("%s: %s", record_id, describe_axes(project_axes(K, pose, render.axis_len)))

    triaxis = render_triaxis(K, pose, render.axis_len, render.thickness)
    query = render_query(K, pose)
    degradation = DegradationSpec(render.occlusion_frac, render.noise_sigma,
                                  render.blur_radius, int(rng.integers(0, 2**31 - 1)))
    degraded = apply_degradation(query.data, degradation)

    paths = {kind: f"images/{record_id}_{kind}.f32" for kind in ("query", "triaxis", "degraded")}
    write_raw_image(root / paths["query"], query.data)
    write_raw_image(root / paths["triaxis"], triaxis.data)
    write_raw_image(root / paths["degraded"], degraded)
    if render.export_ppm:
        export_ppm(root / "ppm" / f"{record_id}_triaxis.ppm", triaxis.data)
        export_ppm(root / "ppm" / f"{record_id}_degraded.ppm", degraded)

    target = observation_target(K, pose, triaxis, render, config.guidance.sharpness)
    return DatasetRecord(record_id, split, pose, K, paths["query"], paths["triaxis"],
                         paths["degraded"], degradation, seed, target)


def write_manifest(root, config: RunConfig, records: List[DatasetRecord]) -> Dict:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "config": config.to_record(),
        "records": [r.to_record() for r in records],
    }
    dump_json(Path(root) / MANIFEST_NAME, manifest)
    return manifest


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = load_json(root / MANIFEST_NAME)
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise IoError(f"unsupported manifest schema {manifest.get('schema')} in '{root}'")
    config = RunConfig.from_record(manifest["config"])
    records = [DatasetRecord.from_record(r) for r in manifest["records"]]
    return Dataset(root, config, records)


def cmd_render_dataset(config: RunConfig, n_train: int, n_test: int, out_dir) -> Dict:
    if n_train < 1 or n_test < 1:
        raise PipelineError("n_train and n_test must both be >= 1")

    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create dataset directory '{root}': {exc}") from exc

    jobs = [("train", i) for i in range(n_train)] + [("test", i) for i in range(n_test)]
    workers = worker_count(config.seeds.deterministic)
    logger.info("rendering %d train / %d test records into %s (%d workers)",
                n_train, n_test, root, workers)

    if workers == 1:
        records = [_render_record(root, config, split, i) for split, i in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            records = list(executor.map(lambda job: _render_record(root, config, *job), jobs))

    return write_manifest(root, config, records)
