"""Instance-aware visual prompt tuning on a self-contained toy ViT.

A frozen transformer backbone is adapted through prompt tokens: per-input
probabilistic prompts fused with dataset-level prompts at layer 1, and a
top-m principal-subspace projection carrying prompt outputs between layers
with a learnable remainder. m interpolates exactly between deep (m=0) and
shallow (m=d) prompting.
"""

from .backbone import ViTConfig
from .errors import ConfigError, DimensionError, FormatError, ModeMismatchError, NumericError
from .harness import RunConfig, SyntheticDatasetSpec
from .inference import InferenceConfig
from .numerics import RngState, Tensor
from .prompt_engine import PromptConfig
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "FormatError",
    "InferenceConfig",
    "ModeMismatchError",
    "NumericError",
    "PromptConfig",
    "RngState",
    "RunConfig",
    "SyntheticDatasetSpec",
    "Tensor",
    "TrainConfig",
    "ViTConfig",
    "__version__",
]
