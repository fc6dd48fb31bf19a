"""Direct RGB-D SLAM: photometric and geometric keyframe tracking, multi-view
inverse-depth mapping and pose-graph loop closure."""

from .config import RunConfig, load_config
from .se3 import PinholeIntrinsics, Pose, exp_se3, log_so3
from .system import SlamResult, SlamSystem, run_slam

__all__ = ["PinholeIntrinsics", "Pose", "RunConfig", "SlamResult", "SlamSystem", "exp_se3", "load_config",
           "log_so3", "run_slam"]
__version__ = "0.1.0"
