"""CGRSeg decoder stack with from-scratch reverse-mode gradients.

Modules:
    tensor    rank-4 tensor type, splitmix64 RNG, autodiff tape, core ops
    blocks    rectangular self-calibration attention/module, prototype head
    model     full configurable segmentation pipeline
    flops     multiply-accumulate and parameter accounting
    gradcheck finite-difference gradient oracle
    data      synthetic shapes dataset
    train     loss, SGD, poly LR, mIoU, toy training loop
    weights   binary weight file format
    netpbm    PPM/PGM image input and output
    config    structured config files
    cli       command-line entry points
"""

from .tensor import Rng, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["Tensor", "Rng", "Tape", "backward", "__version__"]
