"""Event-anchored contrastive pretraining for irregular clinical event streams.

Submodules: ``events`` (data model, detectors, windows, splits),
``synthetic`` (ground-truth cohort generator), ``featurize`` (vocabulary,
tokenization, tabular aggregates), ``encoder``, ``objectives`` (EBCL and the
OCP / forecasting / imputation baselines), ``training``, ``evaluation``,
``analysis`` and ``cli``.
"""
__version__ = "0.1.0"

from .errors import CheckpointError, ConfigurationError, EbclError, EventStreamError, TrainingError

__all__ = ["__version__", "EbclError", "ConfigurationError", "EventStreamError", "TrainingError", "CheckpointError"]
