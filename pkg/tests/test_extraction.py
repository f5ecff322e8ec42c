import numpy as np
import pytest

from axisforge.camera import CameraIntrinsics, Pose, project_axes, rot_x, rot_y
from axisforge.exceptions import (
    DegenerateChannel, EmptyChannel, ExtractionError, NoIntersection, OutsideImage,
    VanishingMass,
)
from axisforge.extraction import (
    AxisObservation, extract_axes_hard, extract_axes_soft, extract_with_vjp,
    soft_extract_vjp,
)
from axisforge.render import render_triaxis

K = CameraIntrinsics.reference(128)
POSE = Pose(rot_x(20.0) @ rot_y(30.0), np.array([0.2, -0.1, 5.0]))


def _angles_deg(a, b):
    cos = np.clip(np.einsum("ij,ij->i", a, b), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def _small_scene():
    K32 = CameraIntrinsics.reference(32)
    pose = Pose(rot_x(25.0) @ rot_y(-35.0), np.array([0.1, -0.05, 3.5]))
    return render_triaxis(K32, pose, 1.5, 1.0).data


def test_hard_extraction_matches_projection():
    img = render_triaxis(K, POSE, 1.0, 2.0)
    obs = extract_axes_hard(img)
    exact = project_axes(K, POSE)

    assert _angles_deg(obs.dir, exact.dir).max() < 1.0
    assert np.linalg.norm(obs.origin_px - exact.origin_px) < 1.0
    assert np.allclose(np.linalg.norm(obs.dir, axis=1), 1.0, atol=1e-9)
    assert 0 <= obs.centroid[0] < 128 and 0 <= obs.centroid[1] < 128


def test_soft_agrees_with_hard():
    img = render_triaxis(K, POSE, 1.0, 2.0)
    hard = extract_axes_hard(img)
    soft = extract_axes_soft(img, 50.0)
    assert _angles_deg(hard.dir, soft.dir).max() < 0.5
    assert np.linalg.norm(hard.origin_px - soft.origin_px) < 0.5


def test_empty_channel():
    data = render_triaxis(K, POSE, 1.0, 2.0).data.copy()
    data[:, :, 1] = 0.0
    with pytest.raises(EmptyChannel) as info:
        extract_axes_hard(data)
    assert info.value.axis == 1


def test_disk_is_degenerate():
    data = render_triaxis(K, POSE, 1.0, 2.0).data.copy()
    v, u = np.mgrid[0:128, 0:128]
    data[:, :, 2] = ((u - 40) ** 2 + (v - 40) ** 2 <= 100).astype(float)
    with pytest.raises(DegenerateChannel) as info:
        extract_axes_hard(data)
    assert info.value.axis_name == "Z"


def test_parallel_lines_do_not_intersect():
    data = np.zeros((64, 64, 3))
    for i, row in enumerate((10, 30, 50)):
        data[row, 5:60, i] = 1.0
        data[row + 1, 5:60, i] = 1.0
    with pytest.raises(NoIntersection):
        extract_axes_hard(data)


def test_uniform_image_is_isotropic_not_vanishing():
    ones = np.ones((32, 32, 3))
    with pytest.raises(DegenerateChannel):
        extract_axes_soft(ones)
    with pytest.raises(VanishingMass):
        extract_axes_soft(np.zeros((32, 32, 3)))
    with pytest.raises(ExtractionError):
        extract_axes_hard(np.zeros((32, 32, 3)))


def test_zero_cotangent_gives_zero_gradient():
    img = _small_scene()
    grad = soft_extract_vjp(img, 50.0, AxisObservation.zeros())
    assert grad.shape == img.shape
    assert not grad.any()


def test_centroid_cotangent_follows_soft_mass():
    img = _small_scene()
    cot = AxisObservation(np.zeros(2), np.zeros((3, 2)), np.array([1.0, -0.5]))
    grad = soft_extract_vjp(img, 50.0, cot)
    peak = np.abs(grad).max()
    assert peak > 0
    assert np.abs(grad[img == 0.0]).max() < 1e-8 * peak


def test_soft_vjp_matches_finite_differences():
    rng = np.random.default_rng(4)
    img = _small_scene()
    sharpness = 20.0
    cot = AxisObservation.from_vector(rng.standard_normal(10))
    direction = rng.standard_normal(img.shape)
    h = 1e-4

    def f(x):
        return extract_axes_soft(x, sharpness).as_vector() @ cot.as_vector()

    fd = (f(img + h * direction) - f(img - h * direction)) / (2 * h)
    an = (soft_extract_vjp(img, sharpness, cot) * direction).sum()
    assert abs(fd - an) <= 1e-4 * abs(an)


def test_extract_with_vjp_matches_soft_vjp():
    img = _small_scene()
    cot = AxisObservation.from_vector(np.linspace(-1.0, 1.0, 10))
    obs, grad = extract_with_vjp(img, 50.0, lambda gen: cot)
    assert np.allclose(obs.as_vector(), extract_axes_soft(img, 50.0).as_vector())
    assert np.allclose(grad, soft_extract_vjp(img, 50.0, cot))


def test_observation_vector_layout():
    obs = AxisObservation([1.0, 2.0], [[1, 0], [0, 1], [0.6, 0.8]], [3.0, 4.0])
    vec = obs.as_vector()
    assert vec.tolist() == [1.0, 2.0, 1.0, 0.0, 0.0, 1.0, 0.6, 0.8, 3.0, 4.0]
    assert AxisObservation.from_vector(obs.to_record()).to_record() == obs.to_record()

    doubled = obs + obs
    assert np.allclose(doubled.as_vector(), 2 * vec)
    assert np.allclose((0.5 * obs).as_vector(), 0.5 * vec)

    # centroid defaults to the origin
    assert np.array_equal(AxisObservation([5.0, 6.0], np.eye(3, 2)).centroid, [5.0, 6.0])

    with pytest.raises(ValueError):
        AxisObservation.from_vector(np.zeros(9))


@pytest.mark.parametrize("extract", [extract_axes_hard, lambda x: extract_axes_soft(x, 50.0)])
def test_quarter_turn_equivariance(extract):
    data = render_triaxis(K, POSE, 1.0, 2.0).data
    n = data.shape[1]
    obs = extract(data)
    turned = extract(np.ascontiguousarray(np.rot90(data, 1, axes=(0, 1))))

    # pixel (u, v) moves to (v, n - 1 - u)
    expected_dir = np.stack([obs.dir[:, 1], -obs.dir[:, 0]], axis=1)
    assert _angles_deg(turned.dir, expected_dir).max() < 1e-3
    assert np.allclose(turned.origin_px, [obs.origin_px[1], n - 1 - obs.origin_px[0]], atol=1e-6)
    assert np.allclose(turned.centroid, [obs.centroid[1], n - 1 - obs.centroid[0]], atol=1e-6)


def test_soft_vjp_is_linear_in_the_cotangent():
    rng = np.random.default_rng(9)
    img = _small_scene()
    a = AxisObservation.from_vector(rng.standard_normal(10))
    b = AxisObservation.from_vector(rng.standard_normal(10))
    ga = soft_extract_vjp(img, 50.0, a)
    gb = soft_extract_vjp(img, 50.0, b)
    scale = max(np.abs(ga).max(), np.abs(gb).max())

    assert np.abs(soft_extract_vjp(img, 50.0, a + b) - (ga + gb)).max() <= 1e-10 * scale
    assert np.abs(soft_extract_vjp(img, 50.0, -2.5 * a) + 2.5 * ga).max() <= 1e-10 * scale


def test_observation_bounds():
    obs = AxisObservation([10.0, 120.0], np.eye(3, 2), [64.0, 64.0])
    assert obs.inside(128, 128)
    assert not obs.inside(128, 100)
    assert not AxisObservation([-0.5, 3.0], np.eye(3, 2)).inside(128, 128)
    assert not AxisObservation([3.0, 3.0], np.eye(3, 2), [128.0, 3.0]).inside(128, 128)


def test_axes_meeting_outside_the_image():
    # three segments on lines through (-10, 16), left of the image
    data = np.zeros((32, 32, 3))
    for u in range(5, 26):
        for channel, slope in enumerate((0.0, 0.25, -0.25)):
            data[int(round(16 + slope * (u + 10))), u, channel] = 1.0
    with pytest.raises(OutsideImage):
        extract_axes_hard(data)
