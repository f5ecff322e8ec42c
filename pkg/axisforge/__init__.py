from .exceptions import AxisForgeError
from .camera import (
    CameraIntrinsics, Pose, Omega, AxisLines, compute_omega, project_point,
    project_points, project_axes,
)
from .render import TriAxisImage, QueryImage, DegradationSpec, render_triaxis, render_query, apply_degradation
from .extraction import AxisObservation, extract_axes_hard, extract_axes_soft, soft_extract_vjp
from .tbm import CornerImage, CornerSolution, LegRatios, solve_depth_scales, recover_pose
from .metrics import ModelPoints, MetricsReport, evaluate_suite
from .config import RunConfig, load_config
