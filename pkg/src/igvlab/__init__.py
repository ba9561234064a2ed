"""Grounding-indicator video QA with scene interventions, on a small numpy autodiff engine."""

from .benchmark import SyntheticSpec, compute_lmi, generate_dataset, split_ood
from .config import RunConfig, default_config, load_config
from .errors import ContractError, InterventionUnavailable, NumericError, ShapeMismatchError
from .objective import VARIANTS
from .trainer import evaluate, fit

__all__ = [
    "ContractError", "InterventionUnavailable", "NumericError", "RunConfig",
    "ShapeMismatchError", "SyntheticSpec", "VARIANTS", "compute_lmi", "default_config",
    "evaluate", "fit", "generate_dataset", "load_config", "split_ood",
]
__version__ = "0.1.0"
