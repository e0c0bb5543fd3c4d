"""Desk-scale laboratory for two-stage embedding-model training:
embedding distillation into a tiny transformer, then per-task LoRA
adapters, with the evaluation and ablation tooling around them."""
from .errors import (
    ConfigError,
    ContractError,
    DegenerateBatchError,
    DomainError,
    EmbedLabError,
    FormatError,
    NonFiniteError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DegenerateBatchError",
    "DomainError",
    "EmbedLabError",
    "FormatError",
    "NonFiniteError",
    "__version__",
]
