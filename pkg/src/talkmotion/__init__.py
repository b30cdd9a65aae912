"""Conditional motion diffusion for audio-driven 3DMM facial motion.

Three transformer denoisers (lips, expression, head pose) are trained on
sequences of 3DMM parameters conditioned on per-frame speech features,
phoneme tokens, a transcript embedding, and the first motion frame. Generated
motion is scored with similarity-normalized landmark distances.
"""

from .conditioning import ConditionBundle, ConditionMemory
from .dataset import Clip, Manifest, SyntheticSpec, generate_synthetic_dataset, load_manifest, read_dataset
from .denoiser import DenoiserConfig, DenoiserModel, init_model, load_model, save_model
from .diffusion import DiffusionSchedule, make_schedule, q_sample, p_sample_step, sample_sequence, scaled_schedule
from .evaluation import f_lmd, kabsch_umeyama, lmd, m_lmd, make_landmark_basis
from .kernels import BACKEND
from .motion import (DEFAULT_LAYOUT, KINDS, MotionSequence, NormalizationStats, ParameterLayout,
                     merge_motion, slice_motion)
from .pipeline import GenerationRequest, export_for_renderer, freeze_head_pose, generate_talking_motion
from .trainer import TrainConfig, compose_loss, train_model

__version__ = "0.1.0"
