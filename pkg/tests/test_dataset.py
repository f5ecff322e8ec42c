from pathlib import Path

import numpy as np
import pytest

from axisforge.camera import axis_pixel_lengths, project_axes
from axisforge.config import RenderConfig, load_config
from axisforge.dataset import (
    MANIFEST_NAME, DatasetRecord, cmd_render_dataset, load_dataset, sample_pose,
)
from axisforge.exceptions import (
    DegenerateSamplingExhausted, InvalidRecordId, IoError, PipelineError,
)
from axisforge.extraction import extract_axes_hard
from axisforge.utils import dump_json, load_json

CONFIGS = Path(__file__).resolve().parent.parent / "samples" / "configs"


def _ci(*overrides):
    return load_config(CONFIGS / "ci.json", list(overrides))


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_render_dataset_layout(tmp_path):
    manifest = cmd_render_dataset(_ci(), 3, 2, tmp_path)
    assert manifest["schema"] == 1
    assert [r["id"] for r in manifest["records"]] == [
        "train-00000", "train-00001", "train-00002", "test-00000", "test-00001"]

    dataset = load_dataset(tmp_path)
    assert len(dataset.split("train")) == 3
    assert len(dataset.split("test")) == 2
    assert dataset.get("test-00001").split == "test"
    assert dataset.get("test-00009") is None

    rec = dataset.records[0]
    triaxis = dataset.triaxis(rec)
    assert triaxis.data.shape == (16, 16, 3)
    assert triaxis.data.min() >= 0.0 and triaxis.data.max() <= 1.0
    assert dataset.query(rec).data.shape == (16, 16, 1)
    clean = dataset.query(rec, degraded=False).data
    assert np.count_nonzero(clean) > 0


def test_render_dataset_is_deterministic(tmp_path):
    cmd_render_dataset(_ci(), 3, 2, tmp_path / "a")
    cmd_render_dataset(_ci(), 3, 2, tmp_path / "b")
    # the worker count does not change the output
    cmd_render_dataset(_ci("seeds.deterministic=false"), 3, 2, tmp_path / "c")

    a, b, c = (_files(tmp_path / name) for name in "abc")
    assert a == b
    assert {k: v for k, v in a.items() if k != MANIFEST_NAME} == \
           {k: v for k, v in c.items() if k != MANIFEST_NAME}
    assert load_json(tmp_path / "a" / MANIFEST_NAME)["records"] == \
           load_json(tmp_path / "c" / MANIFEST_NAME)["records"]

    cmd_render_dataset(_ci("seeds.seed=8"), 3, 2, tmp_path / "d")
    assert _files(tmp_path / "d") != a


def test_manifest_round_trip(tmp_path):
    cmd_render_dataset(_ci(), 2, 1, tmp_path)
    dataset = load_dataset(tmp_path)
    for rec in dataset.records:
        again = DatasetRecord.from_record(rec.to_record())
        assert again.to_record() == rec.to_record()
    assert dataset.config == _ci()


def test_sampled_poses_are_usable(tmp_path):
    config = _ci()
    cmd_render_dataset(config, 6, 2, tmp_path)
    dataset = load_dataset(tmp_path)
    render = config.render
    for rec in dataset.records:
        assert rec.pose.T[2] >= render.depth_min
        lines = project_axes(rec.intrinsics, rec.pose, render.axis_len)
        assert np.allclose(np.linalg.norm(lines.dir, axis=1), 1.0)
        lengths = axis_pixel_lengths(rec.intrinsics, rec.pose, render.axis_len)
        assert lengths.min() >= render.min_axis_px


def test_extraction_on_reference_renders(tmp_path):
    config = load_config(CONFIGS / "reference.json", ["seeds.deterministic=true"])
    cmd_render_dataset(config, 1, 20, tmp_path)
    dataset = load_dataset(tmp_path)

    errors = []
    for rec in dataset.split("test"):
        exact = project_axes(rec.intrinsics, rec.pose, config.render.axis_len)
        obs = extract_axes_hard(dataset.triaxis(rec))
        cos = np.clip(np.einsum("ij,ij->i", obs.dir, exact.dir), -1.0, 1.0)
        errors.extend(np.degrees(np.arccos(cos)))
    assert np.median(errors) < 2.0


def test_ppm_export(tmp_path):
    cmd_render_dataset(_ci("render.export_ppm=true"), 1, 1, tmp_path)
    ppm = sorted((tmp_path / "ppm").glob("*.ppm"))
    assert len(ppm) == 4
    assert all(p.read_bytes().startswith(b"P6") for p in ppm)


def test_sampling_exhaustion():
    render = RenderConfig(min_axis_px=1000.0)
    with pytest.raises(DegenerateSamplingExhausted):
        sample_pose(np.random.default_rng(0), render.intrinsics(), render)


def test_bad_arguments_and_manifests(tmp_path):
    with pytest.raises(PipelineError):
        cmd_render_dataset(_ci(), 0, 1, tmp_path)

    with pytest.raises(IoError):
        load_dataset(tmp_path / "absent")

    cmd_render_dataset(_ci(), 1, 1, tmp_path / "ds")
    manifest = load_json(tmp_path / "ds" / MANIFEST_NAME)
    manifest["schema"] = 99
    dump_json(tmp_path / "ds" / MANIFEST_NAME, manifest)
    with pytest.raises(IoError):
        load_dataset(tmp_path / "ds")

    manifest["schema"] = 1
    manifest["records"][0]["id"] = "train 0"
    dump_json(tmp_path / "ds" / MANIFEST_NAME, manifest)
    with pytest.raises(InvalidRecordId):
        load_dataset(tmp_path / "ds")


def test_truncated_image(tmp_path):
    cmd_render_dataset(_ci(), 1, 1, tmp_path)
    dataset = load_dataset(tmp_path)
    rec = dataset.records[0]
    path = tmp_path / rec.triaxis_path
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(IoError):
        dataset.triaxis(rec)
