"""Calibrated markerless gait analysis from multiview keypoints.

Fits a Gaussian posterior over joint-angle trajectories to noisy 2D
keypoint tracks and validates that the reported uncertainty is worth
trusting: PIT/ECE calibration scores, coverage curves, and
uncertainty-filtered gait metrics, exercised against a built-in synthetic
gait simulator.
"""

from .calibration import (
    NOMINAL_LEVELS,
    CalibrationReport,
    PitSet,
    calibration_curve,
    coverage_at_nominal,
    ece_from_pit,
    halfnormal_quantile,
    kinematic_pit,
    spatial_pit,
)
from .cameras import (
    BehindCameraError,
    Camera,
    CameraRig,
    ObservationSet,
    load_observations,
    load_rig,
    project,
    project_points,
    rig_from_dict,
    rig_to_dict,
    save_observations,
    triangulate_point,
)
from .gait import (
    BiasTable,
    GaitMetricSample,
    StancePhase,
    WalkwayFrame,
    align_to_walkway,
    bias_correct,
    detect_stance,
    metric_posterior,
    step_length,
    stratify_by_uncertainty,
    stride_length,
)
from .inference import (
    FitConfig,
    FitFailure,
    FitReport,
    InsufficientDataError,
    LossWeights,
    NoiseModel,
    NonFiniteLossError,
    anneal_lambda_ece,
    fit,
    gradient_check,
    internal_ece,
    keypoint_nll,
    loss_graph_builder,
    total_loss,
)
from .kernels import active_backend, set_backend
from .kinematics import (
    ChainError,
    KinematicChain,
    SiteOffsets,
    chain_from_dict,
    chain_to_dict,
    fk_batch,
    forward_kinematics,
    joint_limit_excess,
    load_chain,
)
from .synth import (
    GaitScenario,
    GroundTruthBundle,
    ScenarioError,
    build_biped,
    build_rig,
    fixture_names,
    generate_trajectory,
    load_fixture,
    load_scenario,
    render_observations,
)
from .trajectory import (
    PosteriorMoment,
    SpanError,
    TrajectoryBasis,
    VariationalTrajectory,
    entropy,
    evaluate,
    lowrank_logdet,
    sample,
    sample_path,
)

__version__ = "0.1.0"
