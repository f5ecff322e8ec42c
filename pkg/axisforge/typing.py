from typing import Tuple, Union

import numpy as np

Vec2 = np.ndarray
Vec3 = np.ndarray
Mat3 = np.ndarray

# square side in pixels, or (width, height)
ImageSize = Union[int, Tuple[int, int]]
