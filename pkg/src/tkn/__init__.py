"""Target-kernel networks.

Convolution layers whose kernels carry a separable attention window. The
window's centre and scale are trained with the kernels; an L2 penalty on the
scale shrinks each kernel's region of interest, and the convolution is only
evaluated inside it.
"""
from .attention import AttentionParams, build_map, clip_params, compute_roi, grad_params
from .estimator import TKNClassifier
from .flops import FlopReport, count as count_flops
from .network import LayerSpec, Model, NetworkSpec, build_cnn6, build_named, build_tkn6, count_params
from .optim import NesterovSGD
from .target import TargetLayer, target_backward, target_forward
from .tensor import Roi, conv2d, conv2d_roi
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AttentionParams", "build_map", "clip_params", "compute_roi", "grad_params",
    "TKNClassifier", "FlopReport", "count_flops", "LayerSpec", "Model", "NetworkSpec",
    "build_cnn6", "build_named", "build_tkn6", "count_params", "NesterovSGD",
    "TargetLayer", "target_backward", "target_forward", "Roi", "conv2d", "conv2d_roi",
    "TrainConfig", "evaluate", "train",
]
