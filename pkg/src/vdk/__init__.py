"""Visual debate explanations for image classifiers.

A trained classifier's latent space is distilled into a discrete codebook;
two learned players then stage a zero-sum debate over those discrete
features, and the resulting transcripts are rendered as visual explanations
and scored for completeness, faithfulness, consensus and split ratio.
"""

__version__ = "0.1.0"

from vdk.errors import (
    ConfigurationError,
    ContractError,
    DependencyError,
    TrainingDivergedError,
)

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DependencyError",
    "TrainingDivergedError",
    "__version__",
]
