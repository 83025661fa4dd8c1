"""Infrastructure-assisted human pose estimation and personal-space-aware MPC navigation
for a four-wheel-steered robot, with a deterministic simulation harness."""

from .camera_geometry import (
    PixelHeightNoise,
    ProjectionMatrix,
    back_project,
    back_projection_jacobian,
    project,
    propagate_covariance,
)
from .errors import (
    ConfigError,
    DegenerateBackProjection,
    DegenerateProjection,
    DegenerateSideslip,
    MissingJoints,
    NoConvergence,
    SingularCovariance,
    SocialNavError,
    SteeringOutOfRange,
)
from .metrics import MetricsReport, compute_metrics
from .mpc_planner import MpcParams, MpcPlanner, PlanResult, Reference, plan_step
from .pose_estimation import (
    LidarJointMeasurement,
    PosePrior,
    RefinedPose,
    SkeletonModel,
    default_skeleton,
    heading_from_pose,
    pose_prior_from_keypoints,
    refine_pose,
)
from .scenario import ScenarioConfig, load_scenario
from .simulation import EpisodeLog, run_episode
from .social_field import PersonPose, PsParams, ps_value
from .tracking_fusion import Detection, FusedObject, FusionConfig, Track, Tracker
from .vehicle_model import ControlInput, RobotGeometry, RobotState, linearize, step

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
