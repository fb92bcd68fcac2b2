"""Joint mixed-precision quantization and structured pruning with gated residual quantizers."""

from .arch import ArchSpec, parse_arch
from .autodiff import Tensor
from .cost import LayerCost, NetworkCost, bop_count, lambda_prime, mac_count, network_bops, nonpower_bins
from .gates import HardConcrete, open_probability, sample_gate, test_time_gate
from .model import Model
from .quantizer import Quantizer, quantize
from .training import TrainConfig, fix_gates_and_finetune, post_train, sensitivity_baseline, train_joint

__version__ = "0.1.0"
