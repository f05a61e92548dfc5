"""Numerical core: circuit simulator, dense nets, policies, diffusion, RL and metrics."""

from .diffusion import Denoiser, NoiseSchedule, ProxyClassifier, ShapeDataset
from .policy import ClassicalActor, Critic, HybridActor
from .rl import GuidanceEnv, RolloutBuffer, TargetGuidanceEnv

__all__ = [
    'ClassicalActor',
    'Critic',
    'Denoiser',
    'GuidanceEnv',
    'HybridActor',
    'NoiseSchedule',
    'ProxyClassifier',
    'RolloutBuffer',
    'ShapeDataset',
    'TargetGuidanceEnv',
]
