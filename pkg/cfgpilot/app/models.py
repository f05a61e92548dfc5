"""Configuration models for the guidance controller experiments."""

from typing import Dict, List, Literal, Optional, Union
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_VERSION = 1


class ActorKind(str, Enum):
    """Which controller drives the guidance scale."""
    QUANTUM = "quantum"
    CLASSICAL = "classical"
    FIXED = "fixed"
    LINEAR = "linear"
    COSINE = "cosine"

    @property
    def is_learned(self) -> bool:
        return self in (ActorKind.QUANTUM, ActorKind.CLASSICAL)


class StrictModel(BaseModel):
    """Base for every config section: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class VqcConfig(StrictModel):
    """Shape of the variational circuit."""
    n_qubits: int = Field(4, ge=1, le=12)
    depth: int = Field(2, ge=1)

    @property
    def n_params(self) -> int:
        return 3 * self.n_qubits * self.depth


class PPOConfig(StrictModel):
    clip_eps: float = Field(0.1, gt=0.0, lt=1.0)
    entropy_coef: float = Field(0.01, ge=0.0)
    value_coef: float = Field(0.5, ge=0.0)
    gamma: float = Field(0.99, gt=0.0, le=1.0)
    gae_lambda: float = Field(0.95, ge=0.0, le=1.0)
    actor_lr: float = Field(1e-4, gt=0.0)
    critic_lr: float = Field(1e-3, gt=0.0)
    n_envs: int = Field(8, ge=1)
    horizon: int = Field(512, ge=1)
    epochs: int = Field(4, ge=1)
    minibatch: int = Field(8, ge=1)
    iterations: int = Field(300, ge=1)
    max_grad_norm: Optional[float] = Field(0.5, gt=0.0)

    @model_validator(mode="after")
    def _check_minibatch(self):
        if (self.n_envs * self.horizon) % self.minibatch != 0:
            raise ValueError(
                f"n_envs*horizon={self.n_envs * self.horizon} is not divisible by minibatch={self.minibatch}"
            )
        return self


class RewardConfig(StrictModel):
    """Weights of the per-step reward."""
    alpha: float = Field(1.0, ge=0.0)
    beta: float = Field(0.2, ge=0.0)
    lambda_act: float = Field(5e-3, ge=0.0)
    lambda_tv: float = Field(0.0, ge=0.0)


class ScheduleConfig(StrictModel):
    t_train: int = Field(200, ge=1)
    t_sample: int = Field(50, ge=1)
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(0.02, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_lengths(self):
        if self.t_sample > self.t_train:
            raise ValueError(f"t_sample={self.t_sample} exceeds t_train={self.t_train}")
        if self.beta_end < self.beta_start:
            raise ValueError("beta_end must be >= beta_start")
        return self


class DataConfig(StrictModel):
    seed: Optional[int] = None  # None -> derived from the global seed
    n_per_class: int = Field(250, ge=1)
    image_size: int = Field(16, ge=8)


class DenoiserConfig(StrictModel):
    hidden: List[int] = Field(default_factory=lambda: [256, 256])
    time_dim: int = Field(16, ge=2)
    class_dim: int = Field(16, ge=1)
    p_uncond: float = Field(0.1, ge=0.0, le=1.0)
    epochs: int = Field(600, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    lr_min: float = Field(5e-5, gt=0.0)

    @field_validator("time_dim")
    @classmethod
    def _even_time_dim(cls, value: int) -> int:
        if value % 2:
            raise ValueError("time_dim must be even")
        return value

    @model_validator(mode="after")
    def _check_lr(self):
        if self.lr_min > self.lr:
            raise ValueError(f"lr_min={self.lr_min} exceeds lr={self.lr}")
        return self


class ClassifierConfig(StrictModel):
    hidden: int = Field(64, ge=1)
    epochs: int = Field(40, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0.0)


class ControllerConfig(StrictModel):
    head_hidden: int = Field(8, ge=1)
    classical_hidden: Union[List[int], Literal["matched"]] = Field(default_factory=lambda: [32, 32])
    critic_hidden: List[int] = Field(default_factory=lambda: [64, 64])
    cfg_min: float = Field(2.5, ge=1.0, le=12.0)
    cfg_max: float = Field(7.5, ge=1.0, le=12.0)
    diagnostic_target: Optional[float] = Field(None, ge=1.0, le=12.0)


class RunConfig(StrictModel):
    """Every hyperparameter of an experiment, serialized as one JSON document."""
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    cfg0: float = Field(5.0, ge=1.0, le=12.0)
    actor: ActorKind = ActorKind.QUANTUM
    out_dir: Optional[str] = None
    workers: int = Field(1, ge=1)
    vqc: VqcConfig = Field(default_factory=VqcConfig)
    ppo: PPOConfig = Field(default_factory=PPOConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)

    @field_validator("schema_version")
    @classmethod
    def _check_version(cls, value: int) -> int:
        if value != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {value} (expected {SCHEMA_VERSION})")
        return value


class IterationLog(BaseModel):
    """One row of the controller training log."""
    iteration: int
    mean_reward: float
    actor_loss: float
    critic_loss: float
    clip_fraction: float
    mean_abs_action: float
    mean_guidance: float


class DatasetInfo(BaseModel):
    """JSON sidecar written next to the binary dataset."""
    schema_version: int = SCHEMA_VERSION
    seed: int
    shape: List[int]
    class_names: List[str]
    labels: List[int]
    is_test: List[bool]
    class_counts: Dict[str, int]
    n_images: int


class SampleRecord(BaseModel):
    """One generated image listed in a samples manifest."""
    file: str
    trace: str
    label: int
    class_name: str
    seed: int
    index: int
    episode_reward: float


class SampleManifest(BaseModel):
    actor: ActorKind
    cfg0: float
    params: int
    samples: List[SampleRecord] = Field(default_factory=list)


class EvalRow(BaseModel):
    """Mean and standard deviation of each metric for one model."""
    model: str
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    lpips_mean: float
    lpips_std: float
    params: int
    accuracy: float


class BenchmarkRow(BaseModel):
    model: str
    seed: str
    episodes: int
    reward_mean: float
    reward_std: float
    params: int


class AblationRow(BaseModel):
    """Episodic reward of one circuit shape at one sampling length; fixed-guidance rows have no circuit."""
    model: str
    n_qubits: int
    depth: int
    t_sample: int
    params: int
    reward_mean: float
    reward_std: float
