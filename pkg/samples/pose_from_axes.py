import numpy as np
from axisforge import CameraIntrinsics, Pose, AxisObservation, project_axes, recover_pose
from axisforge.camera import rot_x, rot_y, describe_axes
from axisforge.metrics import rotation_geodesic

K = CameraIntrinsics.reference(128)
pose = Pose(rot_x(20.0) @ rot_y(30.0), np.array([0.2, -0.1, 5.0]))

lines = project_axes(K, pose)
print(describe_axes(lines))

report = []
pred = recover_pose(AxisObservation.from_lines(lines), K,
                    scale_lambda_O=pose.T[2], report=report)

print(f"rotation error: {rotation_geodesic(pose.R, pred.R):.3g} deg")
print(f"translation:    {pred.T} (true {pose.T})")
print(f"solver:         {report[0]}")
