"""KarSein CTR model, vanilla KAN/MLP baselines, and their experiment tooling in numpy."""

import os as _os

# BLAS reads these once at load time, so they must be set before numpy is imported.
_threads = _os.environ.get("KARSEIN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .model import KarseinModel, ModelConfig, load_checkpoint, save_checkpoint  # noqa: E402
from .training import TrainConfig, TrainReport, train  # noqa: E402

__all__ = ["KarseinModel", "ModelConfig", "TrainConfig", "TrainReport", "train",
           "save_checkpoint", "load_checkpoint"]
__version__ = "0.1.0"
