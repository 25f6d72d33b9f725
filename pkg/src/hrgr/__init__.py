"""Hierarchical region-aware graph reasoning as a NumPy kernel library.

Every operation has a hand-written vector-Jacobian product; see
:mod:`hrgr.autodiff` for the conventions and :mod:`hrgr.checks` for the
finite-difference suite.
"""

from .autodiff import DiffOp, GradReport, Step, backprop_chain, grad_check, run_chain
from .dfp import ChannelReducer, DfpConfig, append_coords, gelu, run_dfp
from .estimators import DifferentiableFeaturePartition, HRGRTransformer
from .graph import (StackedIndexVolume, build_adjacency_oracle, build_adjacency_parallel,
                    stack_index_maps)
from .harness import ToyConfig, ToyManipulationDetector, train_toy
from .loss import FocalConfig, focal_loss
from .metrics import adjusted_rand_index, evaluate, f1_at_eer, pixel_auc
from .reasoning import HrgrConfig, HrgrParams, hrgr_block, load_params, save_params
from .synthetic import SyntheticSpec, gen_blobs, gen_forgery
from .tensor import load, matmul, save

__version__ = "0.1.0"

__all__ = [
    "DiffOp",
    "Step",
    "GradReport",
    "run_chain",
    "backprop_chain",
    "grad_check",
    "ChannelReducer",
    "DfpConfig",
    "append_coords",
    "gelu",
    "run_dfp",
    "DifferentiableFeaturePartition",
    "HRGRTransformer",
    "StackedIndexVolume",
    "stack_index_maps",
    "build_adjacency_oracle",
    "build_adjacency_parallel",
    "ToyConfig",
    "ToyManipulationDetector",
    "train_toy",
    "FocalConfig",
    "focal_loss",
    "pixel_auc",
    "f1_at_eer",
    "evaluate",
    "adjusted_rand_index",
    "HrgrConfig",
    "HrgrParams",
    "hrgr_block",
    "save_params",
    "load_params",
    "SyntheticSpec",
    "gen_blobs",
    "gen_forgery",
    "load",
    "save",
    "matmul",
]
