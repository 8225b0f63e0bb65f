from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, active_tape, backward, no_grad

__all__ = [
    "Adam", "AdamState", "CheckpointError", "GradCheckReport", "Tape", "Tensor",
    "active_tape", "adam_step", "backward", "grad_check", "load_checkpoint",
    "no_grad", "ops", "save_checkpoint",
]
