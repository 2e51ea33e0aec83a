"""Simulated confidential data marketplace.

Owners publish usage policies in on-chain contracts, consumers pay into
escrow, an attested enclave computes over the owners' encrypted data, and
the result key is released on chain only after the consumer has committed
to its hash.
"""

from .config import ConfigError, ScenarioConfig
from .harness import RunResult, Verdict, World, check_invariants, run

__all__ = ["ConfigError", "ScenarioConfig", "RunResult", "Verdict", "World",
           "check_invariants", "run"]
__version__ = "0.1.0"
