"""Three-branch infrared/visible image fusion network with two-stage training."""

import os

# Large feature maps page-fault on every fresh allocation; asking the allocator
# for transparent huge pages cuts that cost. Only effective if set before torch loads.
os.environ.setdefault("THP_MEM_ALLOC_ENABLE", "1")

from .config import ABLATIONS, TrainConfig, apply_ablation, toy_config  # noqa: E402
from .imaging import Channels, PatchSpec, load_image, save_image  # noqa: E402
from .losses import LossReport, LossWeights  # noqa: E402
from .metrics import MetricsReport, evaluate_directory, evaluate_pair  # noqa: E402
from .model import FeatureTriplet, ModelConfig, SMFNet  # noqa: E402
from .training import Checkpoint, PairedPatches, fuse_pair, train_stage1, train_stage2  # noqa: E402

__all__ = [
    "ABLATIONS",
    "Channels",
    "Checkpoint",
    "FeatureTriplet",
    "LossReport",
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "PairedPatches",
    "PatchSpec",
    "SMFNet",
    "TrainConfig",
    "apply_ablation",
    "evaluate_directory",
    "evaluate_pair",
    "fuse_pair",
    "load_image",
    "save_image",
    "toy_config",
    "train_stage1",
    "train_stage2",
]
__version__ = "0.1.0"
