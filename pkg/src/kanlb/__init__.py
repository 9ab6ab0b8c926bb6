"""kanlb: interpretable load balancing over two links.

A flow-level simulator of an MPLS/Internet link pair, a from-scratch
spline-actor (KAN) / MLP policy stack trained with PPO, symbolic policy
extraction, and a seeded evaluation harness.
"""

__version__ = "0.1.0"

from .errors import ConfigError, StateError

__all__ = ["ConfigError", "StateError", "__version__"]
