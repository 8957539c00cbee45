"""Environment inference for invariant learning.

Infer training environments from a reference model, then train an
invariant learner (IRMv1 or GroupDRO) across them.
"""

__version__ = "0.1.0"

from .exceptions import (ConfigError, DegenerateSplitError, DivergenceError, EIILError,  # noqa: E402
                         IngestionError, ParseError, StageError, ValidationError)
from .learners import ERM, IRM, EnvSplit, GroupDRO  # noqa: E402
from .ei import EIIL, EnvironmentInference, ReferencePack  # noqa: E402

__all__ = [
    "__version__", "ERM", "IRM", "GroupDRO", "EnvSplit", "EIIL", "EnvironmentInference",
    "ReferencePack", "EIILError", "ValidationError", "DegenerateSplitError", "DivergenceError",
    "IngestionError", "ParseError", "ConfigError", "StageError",
]
