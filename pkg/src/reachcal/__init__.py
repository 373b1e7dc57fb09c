"""Data-driven reachable-set prediction with calibrated diffusion scores."""

from .calibration import (
    CalibrationResult,
    ReachPredictor,
    RiskBudget,
    calibrate_all,
    calibrate_scores,
    empirical_risk,
    hb_pvalue,
    membership,
    select_threshold,
)
from .christoffel import ChristoffelModel, christoffel_fit, christoffel_score, monomial_basis
from .datastore import Dataset, Normalizer, SplitIndex, fit_normalizer, load_dataset, save_dataset, split
from .denoiser import DenoiserConfig, DenoiserModel, train_denoiser
from .diffusion import GaussianToy, NoiseSchedule, ScoreConfig, make_schedule, noisify, score
from .dynamics import (
    DuffingParams,
    GrayScottParams,
    QuadrotorParams,
    Trajectory,
    generate_dataset,
    rk4_step,
    simulate_duffing,
    simulate_gray_scott,
    simulate_quadrotor,
)
from .estimator import ChristoffelReachability, DiffusionReachability
from .evaluation import (
    GridSpec,
    MembershipMask,
    VolumeBoundInput,
    build_reference_mask,
    fnr,
    iou_precision,
    pac_validate,
    predict_mask,
    sensitivity_curve,
    volume_bound_check,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationResult", "ReachPredictor", "RiskBudget", "calibrate_all",
    "calibrate_scores", "empirical_risk", "hb_pvalue", "membership",
    "select_threshold", "ChristoffelModel", "christoffel_fit",
    "christoffel_score", "monomial_basis", "Dataset", "Normalizer",
    "SplitIndex", "fit_normalizer", "load_dataset", "save_dataset", "split",
    "DenoiserConfig", "DenoiserModel", "train_denoiser", "GaussianToy",
    "NoiseSchedule", "ScoreConfig", "make_schedule", "noisify", "score",
    "DuffingParams", "GrayScottParams", "QuadrotorParams", "Trajectory",
    "generate_dataset", "rk4_step", "simulate_duffing", "simulate_gray_scott",
    "simulate_quadrotor", "ChristoffelReachability", "DiffusionReachability",
    "GridSpec", "MembershipMask", "VolumeBoundInput", "build_reference_mask",
    "fnr", "iou_precision", "pac_validate", "predict_mask",
    "sensitivity_curve", "volume_bound_check", "__version__",
]
