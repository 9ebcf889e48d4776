"""Run configuration and settings."""
from pathlib import Path
from typing import Dict, List, Optional, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from common.errors import ConfigError
from common.geometry import CameraIntrinsics, Pose
from config.constants import PointMarginalization, ScenePreset


class Settings(BaseSettings):
    """Run configuration (every key may appear in a KEY=value run file)."""

    # Camera
    FX: float = Field(default=100.0, description="Focal length x, pixels")
    FY: float = Field(default=100.0, description="Focal length y, pixels")
    CX: float = Field(default=79.5, description="Principal point x, pixels")
    CY: float = Field(default=59.5, description="Principal point y, pixels")
    WIDTH: int = Field(default=160, description="Image width, pixels")
    HEIGHT: int = Field(default=120, description="Image height, pixels")
    INITIAL_POSE: Optional[str] = Field(
        default=None, description="Initial camera pose T_w_c as 'tx ty tz qx qy qz qw'"
    )

    # Tracking and point management
    PYRAMID_LEVELS: int = Field(default=4, description="Tracking pyramid levels (factor 2)")
    CANDIDATE_DENSITY: int = Field(default=400, description="Target number of candidates per keyframe")
    GRAD_THRESHOLD_ADD: float = Field(default=3.0, description="Added to the block median gradient for selection")
    GRAD_BLOCK_SIZE: int = Field(default=32, description="Block size of the adaptive gradient threshold, pixels")
    TRACKING_MAX_ITERATIONS: int = Field(default=12, description="Gauss-Newton iterations per pyramid level")
    TRACKING_LOST_RMSE: float = Field(default=20.0, description="Finest-level RMSE above which tracking is lost")
    MIN_TRACKED_FRACTION: float = Field(default=0.3, description="Minimum fraction of reference points in view")
    MAX_ACTIVE_POINTS: int = Field(default=800, description="Active + associated points kept in the window")
    TRACE_SAMPLES: int = Field(default=48, description="Inverse-depth samples per epipolar trace")
    TRACE_MIN_DEPTH: float = Field(default=0.3, description="Nearest depth searched by the trace, meters")
    TRACE_MAX_DEPTH: float = Field(default=30.0, description="Farthest depth searched by the trace, meters")
    TRACE_MIN_BASELINE_PX: float = Field(default=2.0, description="Minimum epipolar search length, pixels")
    TRACE_MAX_ERROR: float = Field(default=12.0, description="Max RMS patch error of an accepted trace")
    TRACE_UNIQUENESS: float = Field(default=1.5, description="Second-best / best error ratio of an accepted trace")

    # Keyframe management
    KF_FLOW_FRACTION_T: float = Field(default=0.0223, description="Translational flow trigger, fraction of W+H")
    KF_FLOW_FRACTION_RT: float = Field(default=0.0446, description="Full flow trigger, fraction of W+H")
    KF_AFFINE_WEIGHT: float = Field(default=2.0, description="Weight of |ln a| in the keyframe score")
    MARG_VISIBLE_FRACTION: float = Field(default=0.05, description="Marginalize frames with fewer visible points")
    MARG_AFFINE_THRESHOLD: float = Field(default=0.7, description="Marginalize frames with larger |ln a| to the latest")

    # Filtering and association
    OUTLIER_PIXEL_DIST: float = Field(default=5.0, description="Outlier if pixel distance >= this, pixels")
    OUTLIER_THETA: float = Field(default=0.5, description="Outlier if theta >= this")
    ASSOCIATE_PIXEL_DIST: float = Field(default=2.0, description="Associate if pixel distance < this, pixels")
    ASSOCIATE_THETA: float = Field(default=0.2, description="Associate if theta < this")
    REASSOCIATE_ANGLE_DEG: float = Field(default=10.0, description="Re-associate above this normal angle, degrees")
    REASSOCIATE_RADIUS_FACTOR: float = Field(default=2.0, description="Re-associate above this many radii offset")
    INIT_MIN_COVERAGE: float = Field(default=0.2, description="Fraction of candidates that need rendered depth")

    # Photometric weighting
    HUBER_GAMMA: float = Field(default=9.0, description="Huber threshold, intensity levels")
    GRADIENT_WEIGHT_C: float = Field(default=50.0, description="Gradient weight constant c, intensity levels")
    OUTLIER_ENERGY_FACTOR: float = Field(default=3.0, description="Remove residuals with |r| > factor*gamma after each window solve")
    AFFINE_PRIOR_A: float = Field(default=1e4, description="Prior weight pulling each frame's a to zero")
    AFFINE_PRIOR_B: float = Field(default=1e2, description="Prior weight pulling each frame's b to zero")

    # Window optimization
    WINDOW_SIZE: int = Field(default=7, description="Number of keyframes N_F in the window")
    LM_INITIAL_DAMPING: float = Field(default=1e-4, description="Initial multiplicative LM damping")
    LM_MAX_ITERATIONS: int = Field(default=10, description="Maximum LM iterations per window solve")
    LM_STEP_TOLERANCE: float = Field(default=1e-8, description="Stop when the step norm is below this")
    LM_ENERGY_TOLERANCE: float = Field(default=1e-6, description="Stop when the relative energy decrease is below this")
    POINT_MARGINALIZATION: PointMarginalization = Field(
        default=PointMarginalization.MARGINALIZE, description="Fate of free-depth points of a marginalized frame"
    )
    MIN_OBS_FOR_MARGINALIZATION: int = Field(default=2, description="Observations a point needs to be marginalized")

    # Rendering
    NEAR_CLIP: float = Field(default=0.1, description="Near clip distance, meters")
    FAR_CLIP: float = Field(default=100.0, description="Far clip distance, meters")
    BACKFACE_CULLING: bool = Field(default=False, description="Skip surfels seen from their back side")

    # Map building
    VOXEL_SIZE: float = Field(default=0.2, description="Voxel size of map downsampling, meters")
    NORMAL_NEIGHBORS: int = Field(default=10, description="k of the PCA normal neighborhood")

    # Degeneracy analysis
    COPLANAR_EPSILON: float = Field(default=1e-3, description="e3/e1 below this means coplanar normals")
    PLANE_ANGLE_TOLERANCE_DEG: float = Field(default=2.0, description="Normals closer than this are equal, degrees")
    PLANE_OFFSET_TOLERANCE: float = Field(default=0.05, description="Offsets closer than this are equal, meters")
    NULLSPACE_TOLERANCE: float = Field(default=1e-8, description="Relative singular value of a null direction")

    # Synthetic sequences
    PRESET: ScenePreset = Field(default=ScenePreset.BOX_ROOM, description="Scene preset for simulate")
    NUM_FRAMES: int = Field(default=200, description="Frames to simulate")
    FRAME_RATE: float = Field(default=20.0, description="Simulated frame rate, Hz")
    EXPOSURE_VARIATION: float = Field(default=0.0, description="Relative amplitude of the exposure-time schedule")
    MAP_NOISE_SIGMA: float = Field(default=0.0, description="Gaussian map noise std, meters")
    INITIAL_PERTURBATION_T: float = Field(default=0.0, description="Initial pose translation error, meters")
    INITIAL_PERTURBATION_R_DEG: float = Field(default=0.0, description="Initial pose rotation error, degrees")
    DITHER: bool = Field(default=False, description="Dither before 8-bit quantization")

    # Evaluation
    ASSOCIATION_MAX_DT: float = Field(default=0.01, description="Timestamp association window, seconds")
    RPE_SEGMENTS: str = Field(default="1,2,4", description="Comma-separated RPE segment lengths, meters")

    # Misc
    SEED: int = Field(default=0, description="Seed of all randomness")
    LOG_LEVEL: str = Field(default="INFO", description="Logging level")

    model_config = SettingsConfigDict(env_prefix="SURFLOC_", case_sensitive=True, extra="forbid")

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v):
        v = v.upper()
        if v not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Unknown LOG_LEVEL {v}")
        return v

    @field_validator("RPE_SEGMENTS")
    @classmethod
    def validate_segments(cls, v):
        lengths = [float(s) for s in v.split(",") if s.strip()]
        if not lengths or min(lengths) <= 0:
            raise ValueError("RPE_SEGMENTS must list positive lengths")
        return v

    @model_validator(mode="after")
    def validate_thresholds(self):
        if not (0 < self.CX < self.WIDTH and 0 < self.CY < self.HEIGHT):
            raise ValueError("Principal point must lie inside the image")
        if self.FX <= 0 or self.FY <= 0:
            raise ValueError("Focal lengths must be positive")
        if not self.ASSOCIATE_PIXEL_DIST < self.OUTLIER_PIXEL_DIST:
            raise ValueError("ASSOCIATE_PIXEL_DIST must be below OUTLIER_PIXEL_DIST")
        if not self.ASSOCIATE_THETA < self.OUTLIER_THETA:
            raise ValueError("ASSOCIATE_THETA must be below OUTLIER_THETA")
        if self.WINDOW_SIZE < 2:
            raise ValueError("WINDOW_SIZE must be at least 2")
        if not 0 < self.NEAR_CLIP < self.FAR_CLIP:
            raise ValueError("Clip range must satisfy 0 < NEAR_CLIP < FAR_CLIP")
        return self

    @property
    def camera(self) -> CameraIntrinsics:
        """Camera intrinsics."""
        return CameraIntrinsics(self.FX, self.FY, self.CX, self.CY, self.WIDTH, self.HEIGHT)

    @property
    def initial_pose(self) -> Optional[Pose]:
        """Initial pose T_w_c, if configured."""
        if not self.INITIAL_POSE:
            return None
        values = [float(v) for v in self.INITIAL_POSE.split()]
        if len(values) != 7:
            raise ConfigError("INITIAL_POSE needs 7 values: tx ty tz qx qy qz qw")
        return Pose.from_tum(values)

    @property
    def rpe_segments(self) -> List[float]:
        """RPE segment lengths."""
        return [float(s) for s in self.RPE_SEGMENTS.split(",") if s.strip()]

    def to_env_text(self) -> str:
        """Render as KEY=value lines."""
        lines = []
        for key, value in self.model_dump().items():
            if value is None:
                continue
            if hasattr(value, "value"):
                value = value.value
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


class TrackerConfig(BaseModel):
    """Front-end thresholds."""

    model_config = ConfigDict(frozen=True)

    pyramid_levels: int = 4
    candidate_density: int = 400
    grad_threshold_add: float = 3.0
    grad_block_size: int = 32
    tracking_max_iterations: int = 12
    tracking_lost_rmse: float = 20.0
    min_tracked_fraction: float = 0.3
    max_active_points: int = 800
    trace_samples: int = 48
    trace_min_depth: float = 0.3
    trace_max_depth: float = 30.0
    trace_min_baseline_px: float = 2.0
    trace_max_error: float = 12.0
    trace_uniqueness: float = 1.5
    kf_flow_fraction_t: float = 0.0223
    kf_flow_fraction_rt: float = 0.0446
    kf_affine_weight: float = 2.0
    marg_visible_fraction: float = 0.05
    marg_affine_threshold: float = 0.7
    window_size: int = 7
    outlier_pixel_dist: float = 5.0
    outlier_theta: float = 0.5
    associate_pixel_dist: float = 2.0
    associate_theta: float = 0.2
    reassociate_angle_deg: float = 10.0
    reassociate_radius_factor: float = 2.0
    init_min_coverage: float = 0.2
    huber_gamma: float = 9.0
    gradient_weight_c: float = 50.0

    @model_validator(mode="after")
    def validate_thresholds(self):
        positive = (
            self.outlier_pixel_dist,
            self.outlier_theta,
            self.associate_pixel_dist,
            self.associate_theta,
            self.huber_gamma,
        )
        if min(positive) <= 0:
            raise ValueError("Thresholds must be positive")
        if not self.associate_pixel_dist < self.outlier_pixel_dist:
            raise ValueError("Associate pixel threshold must be tighter than the outlier one")
        if not self.associate_theta < self.outlier_theta:
            raise ValueError("Associate theta threshold must be tighter than the outlier one")
        return self

    @classmethod
    def from_settings(cls, s: Settings) -> "TrackerConfig":
        return cls(
            pyramid_levels=s.PYRAMID_LEVELS,
            candidate_density=s.CANDIDATE_DENSITY,
            grad_threshold_add=s.GRAD_THRESHOLD_ADD,
            grad_block_size=s.GRAD_BLOCK_SIZE,
            tracking_max_iterations=s.TRACKING_MAX_ITERATIONS,
            tracking_lost_rmse=s.TRACKING_LOST_RMSE,
            min_tracked_fraction=s.MIN_TRACKED_FRACTION,
            max_active_points=s.MAX_ACTIVE_POINTS,
            trace_samples=s.TRACE_SAMPLES,
            trace_min_depth=s.TRACE_MIN_DEPTH,
            trace_max_depth=s.TRACE_MAX_DEPTH,
            trace_min_baseline_px=s.TRACE_MIN_BASELINE_PX,
            trace_max_error=s.TRACE_MAX_ERROR,
            trace_uniqueness=s.TRACE_UNIQUENESS,
            kf_flow_fraction_t=s.KF_FLOW_FRACTION_T,
            kf_flow_fraction_rt=s.KF_FLOW_FRACTION_RT,
            kf_affine_weight=s.KF_AFFINE_WEIGHT,
            marg_visible_fraction=s.MARG_VISIBLE_FRACTION,
            marg_affine_threshold=s.MARG_AFFINE_THRESHOLD,
            window_size=s.WINDOW_SIZE,
            outlier_pixel_dist=s.OUTLIER_PIXEL_DIST,
            outlier_theta=s.OUTLIER_THETA,
            associate_pixel_dist=s.ASSOCIATE_PIXEL_DIST,
            associate_theta=s.ASSOCIATE_THETA,
            reassociate_angle_deg=s.REASSOCIATE_ANGLE_DEG,
            reassociate_radius_factor=s.REASSOCIATE_RADIUS_FACTOR,
            init_min_coverage=s.INIT_MIN_COVERAGE,
            huber_gamma=s.HUBER_GAMMA,
            gradient_weight_c=s.GRADIENT_WEIGHT_C,
        )


class OptimizerConfig(BaseModel):
    """Window optimization schedule."""

    model_config = ConfigDict(frozen=True)

    window_size: int = 7
    initial_damping: float = 1e-4
    max_iterations: int = 10
    step_tolerance: float = 1e-8
    energy_tolerance: float = 1e-6
    huber_gamma: float = 9.0
    gradient_weight_c: float = 50.0
    outlier_energy_factor: float = 3.0
    affine_prior_a: float = 1e4
    affine_prior_b: float = 1e2
    point_marginalization: PointMarginalization = PointMarginalization.MARGINALIZE
    min_obs_for_marginalization: int = 2

    @classmethod
    def from_settings(cls, s: Settings) -> "OptimizerConfig":
        return cls(
            window_size=s.WINDOW_SIZE,
            initial_damping=s.LM_INITIAL_DAMPING,
            max_iterations=s.LM_MAX_ITERATIONS,
            step_tolerance=s.LM_STEP_TOLERANCE,
            energy_tolerance=s.LM_ENERGY_TOLERANCE,
            huber_gamma=s.HUBER_GAMMA,
            gradient_weight_c=s.GRADIENT_WEIGHT_C,
            outlier_energy_factor=s.OUTLIER_ENERGY_FACTOR,
            affine_prior_a=s.AFFINE_PRIOR_A,
            affine_prior_b=s.AFFINE_PRIOR_B,
            point_marginalization=s.POINT_MARGINALIZATION,
            min_obs_for_marginalization=s.MIN_OBS_FOR_MARGINALIZATION,
        )


class RenderConfig(BaseModel):
    """Surfel rasterizer options."""

    model_config = ConfigDict(frozen=True)

    near_clip: float = 0.1
    far_clip: float = 100.0
    backface_culling: bool = False

    @classmethod
    def from_settings(cls, s: Settings) -> "RenderConfig":
        return cls(near_clip=s.NEAR_CLIP, far_clip=s.FAR_CLIP, backface_culling=s.BACKFACE_CULLING)


def load_settings(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, str]] = None,
) -> Settings:
    """Load a KEY=value run file, then apply overrides (flags beat the file)."""
    values: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        values.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    if overrides:
        values.update(overrides)
    try:
        return Settings(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


# Global settings instance
settings = Settings()
