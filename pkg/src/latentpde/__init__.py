"""Latent diffusion models for PDE trajectories on grids and irregular meshes."""
from .autoencoder import AutoencoderConfig, LatentAutoencoder
from .backbones import DiT, DiTConfig, Unet3D, UnetConfig
from .conditioning import ConditionSequence, caption_cylinder, caption_smoke, flow_regime, karman_detect
from .diffusion import GuidanceConfig, NoiseSchedule, make_schedule
from .geometry import FieldSample, LatentGridSpec, MeshTranscoder
from .metrics import EvalReport, d_tke, per_timestep_loss, rel_l2
from .persistence import Checkpoint, Dataset, RunConfig, read_dataset, write_dataset
from .solver import ProblemSpec, solve_smoke

__version__ = "0.1.0"
