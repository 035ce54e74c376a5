"""Entanglement distribution over linear repeater chains.

Deterministic discrete-event simulation of two end-to-end delivery schemes:
an asynchronous hop-by-hop protocol ("hopper") and a globally time-slotted
baseline ("sync"), with throughput and fidelity accounting.
"""

from ebitsim.core import (
    DEPHASING_FLOOR,
    ENTANGLEMENT_THRESHOLD,
    ConfigurationError,
    PhysicalParams,
    ProtocolError,
    RandomStream,
    dephase,
    derive_seed,
    swap_fidelity,
)

__all__ = [
    "DEPHASING_FLOOR",
    "ENTANGLEMENT_THRESHOLD",
    "ConfigurationError",
    "PhysicalParams",
    "ProtocolError",
    "RandomStream",
    "dephase",
    "derive_seed",
    "swap_fidelity",
]

__version__ = "0.1.0"
