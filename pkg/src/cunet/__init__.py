"""Multi-modal convolutional sparse coding and its unrolled network.

Submodules: ``tensor`` (conv primitives), ``oracle`` (ISTA solvers),
``model`` (unrolled network), ``train`` (backprop, Adam), ``data`` and
``metrics`` (synthetic tasks, quality measures), ``io`` and ``cli``.
"""

from .model import MIF, MIR, CUNetParams, ModelConfig, cunet_forward, decompose, init_params
from .tensor import ContractError, set_precision

__all__ = ["MIF", "MIR", "CUNetParams", "ModelConfig", "ContractError", "cunet_forward", "decompose", "init_params", "set_precision"]
__version__ = "0.1.0"
