"""pcrdiff package: point cloud registration by denoising rigid transforms."""

from .ablations import AblationPlan, AblationReport, run_ablations
from .config import RunConfig, ScheduleConfig, load_run_config
from .datasyn import DatasetSpec, PairMeta, RegPair, generate_pairs, load_dataset, write_dataset
from .diffusion import NoiseSchedule, cosine_schedule, ddpm_step, forward_sample, sample_loop
from .evalkit import MetricsRecord, evaluate, evaluate_icp, icp, mae_rmse, register_pair
from .exceptions import PcrdError
from .geom3d import Quaternion, RigidTransform, apply, compose, inverse, kabsch
from .hooks import ForwardEvent, ForwardHook, TrainStepEvent, TrainStepHook
from .regnet import (
    CBModelConfig,
    CFModelConfig,
    CorrespondenceBasedNet,
    CorrespondenceFreeNet,
    build_model,
    load_model,
    save_model,
)
from .trainer import TrainConfig, TrainResult, overfit_pair, train_loop, train_step

__all__ = [
    "Quaternion",
    "RigidTransform",
    "apply",
    "compose",
    "inverse",
    "kabsch",
    "NoiseSchedule",
    "cosine_schedule",
    "forward_sample",
    "ddpm_step",
    "sample_loop",
    "CFModelConfig",
    "CBModelConfig",
    "CorrespondenceFreeNet",
    "CorrespondenceBasedNet",
    "build_model",
    "save_model",
    "load_model",
    "TrainConfig",
    "TrainResult",
    "train_step",
    "train_loop",
    "overfit_pair",
    "AblationPlan",
    "AblationReport",
    "run_ablations",
    "DatasetSpec",
    "PairMeta",
    "RegPair",
    "generate_pairs",
    "write_dataset",
    "load_dataset",
    "MetricsRecord",
    "register_pair",
    "evaluate",
    "evaluate_icp",
    "icp",
    "mae_rmse",
    "RunConfig",
    "ScheduleConfig",
    "load_run_config",
    "ForwardEvent",
    "ForwardHook",
    "TrainStepEvent",
    "TrainStepHook",
    "PcrdError",
]
