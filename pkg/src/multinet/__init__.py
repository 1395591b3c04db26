"""Recurrent multi-task vision network on synthetic scenes.

Subpackages: `tensor` (autodiff engine), `nnops` (layers), `model` (the
recurrent architecture), `tasks` (losses and AP metrics), `synthdata`
(scene generator and dataset files), `harness` (training/experiments),
`cli` (command line).
"""

from .model import Multinet, MultinetOutput, TaskConfig
from .tensor import ParamGroup, Tape, Tensor, backward, sgd_step

__all__ = [
    "Multinet",
    "MultinetOutput",
    "TaskConfig",
    "Tensor",
    "Tape",
    "ParamGroup",
    "backward",
    "sgd_step",
]

__version__ = "0.1.0"
