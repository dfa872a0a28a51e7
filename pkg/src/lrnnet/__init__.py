"""Light-weight segmentation network with a reduced non-local module, in numpy."""
from .blocks import NetworkSpec, build_lrnnet, fcb_forward, model_spec, network_forward
from .checkpoint import load_network, read_checkpoint, save_checkpoint
from .cost import attention_flops, bench_latency, count_flops, count_params
from .svn import (RegionGrid, SVNConfig, extract_keys, power_iteration, reduced_nonlocal,
                  standard_nonlocal, svd_oracle, svn_module_forward)
from .tensor import Tape, Tensor, backward, conv2d
from .train import SynthConfig, TrainConfig, evaluate_miou, gen_synthetic_dataset, poly_lr, train

__version__ = "0.1.0"

__all__ = [
    "NetworkSpec", "build_lrnnet", "fcb_forward", "model_spec", "network_forward",
    "load_network", "read_checkpoint", "save_checkpoint",
    "attention_flops", "bench_latency", "count_flops", "count_params",
    "RegionGrid", "SVNConfig", "extract_keys", "power_iteration", "reduced_nonlocal",
    "standard_nonlocal", "svd_oracle", "svn_module_forward",
    "Tape", "Tensor", "backward", "conv2d",
    "SynthConfig", "TrainConfig", "evaluate_miou", "gen_synthetic_dataset", "poly_lr", "train",
]
