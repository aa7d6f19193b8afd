"""Attentional feature fusion in numpy.

Multi-scale channel attention (MS-CAM), attentional and iterative
attentional feature fusion (AFF / iAFF), the context-aware fusion
baselines they generalize, host networks for three fusion scenarios, a
small reverse-mode autodiff engine to train them, and FLOPs/parameter
accounting.
"""
from .analysis import FlopsReport, count_flops, count_params, overhead_ratio
from .attention import MSCAM, global_channel_context, local_channel_context, ms_cam_refine, ms_cam_weights
from .autodiff import Parameter, Tape, Var, grad_check
from .fusion import KINDS, Fusion, fuse, fusion_weight_map, initial_integrate
from .networks import NetworkSpec, build_network, count_blocks, forward_classify
from .tensor import ConfigError, DimensionError, InputError, get_precision, set_precision

__version__ = "0.1.0"

__all__ = [
    "FlopsReport",
    "count_flops",
    "count_params",
    "overhead_ratio",
    "MSCAM",
    "global_channel_context",
    "local_channel_context",
    "ms_cam_refine",
    "ms_cam_weights",
    "Parameter",
    "Tape",
    "Var",
    "grad_check",
    "KINDS",
    "Fusion",
    "fuse",
    "fusion_weight_map",
    "initial_integrate",
    "NetworkSpec",
    "build_network",
    "count_blocks",
    "forward_classify",
    "ConfigError",
    "DimensionError",
    "InputError",
    "get_precision",
    "set_precision",
]
