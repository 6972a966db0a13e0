"""Deterministic federated-learning simulator.

Client training, score- and baseline-aggregation strategies, poisoning
attacks, differential-privacy clipping, and a seeded round orchestrator,
all built on flat numpy parameter vectors.
"""

__version__ = "0.1.0"

from fedsim.errors import ConfigurationError

__all__ = ["ConfigurationError", "__version__"]
