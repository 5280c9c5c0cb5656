"""Interaction-aware multimodal fusion with pairwise Shapley interaction probes."""


def _tune_allocator() -> None:
    """Keep large numpy temporaries on the heap so freed pages are reused.

    The training loop churns hundreds of MB of short-lived float64 arrays
    per step; with glibc's default mmap threshold every one of them incurs
    fresh page faults.  Best effort only.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(512 * 1024 * 1024))  # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(2**31 - 1))          # M_TRIM_THRESHOLD
    except Exception:
        pass


_tune_allocator()

from .autodiff import Tensor, backward
from .model import FusionModel, JointSequence, ModelConfig, load_checkpoint, save_checkpoint
from .synthdata import GenSpec, Sample, generate, read_dataset, write_dataset
from .training import TrainConfig, train

__all__ = [
    "Tensor", "backward",
    "FusionModel", "JointSequence", "ModelConfig",
    "load_checkpoint", "save_checkpoint",
    "GenSpec", "Sample", "generate", "read_dataset", "write_dataset",
    "TrainConfig", "train",
]

__version__ = "0.1.0"
