"""Diffusion-based reorientation pose planning on a synthetic tabletop domain.

Conditional DDPM over 7-d pose latents (position + reorientation
quaternion) with classifier-free guidance on a learned task embedding
and gradient guidance from grasp-feasibility discriminators, plus the
synthetic scene generator, analytic success oracles, training pipeline,
CLI, and HTTP service built around it.
"""

from .config import ExperimentConfig, load_config
from .pose import ReorientPose, Workspace
from .sampler import GuidanceConfig, SamplerOutput, sample
from .schedule import NoiseSchedule, make_schedule

__all__ = [
    "ExperimentConfig",
    "GuidanceConfig",
    "NoiseSchedule",
    "ReorientPose",
    "SamplerOutput",
    "Workspace",
    "load_config",
    "make_schedule",
    "sample",
]

__version__ = "0.1.0"
