"""Marker-sampling segmentation networks with availability-conditioned attention.

Numpy reference implementation: a small reverse-mode autodiff core, UNet and
HeMIS variants, marker sampling and Marker Excite attention, tiled inference,
training with k-fold plans, and rank-based evaluation statistics.
"""
from ._kernels import get_backend, set_backend
from .attention import MarkerAvailability, MEModule, SamplingPolicy, SEModule, sample_markers
from .data import Dataset, SampleRecord, generate_synthetic, preset_config, read_dataset, write_dataset
from .errors import (ConfigError, ContractError, CorruptionError, DegenerateChannelError, DimensionError,
                     GeometryError, InfeasibilityError, MSMEError, NumericError)
from .evaluation import (CombinationLattice, MetricTable, compute_M_total, compute_M_UB, evaluate_model,
                         relative_scores)
from .models import ModelConfig, build_model, geometry_for, load_checkpoint, save_checkpoint
from .stats import mann_whitney_u, wilcoxon_signed_rank
from .tensor import Tape, Tensor, backprop, grad_check
from .tiling import decompose, stitch
from .training import TrainPlan, class_weights, train, train_model, train_ub_ensemble

__version__ = "0.1.0"
