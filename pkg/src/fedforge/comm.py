"""Analytical model-update transfer cost: size / bandwidth + latency.

bytes_per_param models the wire precision (2 for an FP16 wire, 4 for float32)
independently of the float32 numeric core.
"""

from __future__ import annotations

from dataclasses import dataclass

from .params import ParamError


@dataclass(frozen=True)
class NetworkModel:
    bandwidth_bps: float  # bits per second
    latency_s: float = 0.0
    bytes_per_param: int = 2

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ParamError(f"bandwidth must be positive, got {self.bandwidth_bps}")
        if self.latency_s < 0:
            raise ParamError(f"latency must be >= 0, got {self.latency_s}")
        if self.bytes_per_param < 1:
            raise ParamError(f"bytes_per_param must be >= 1, got {self.bytes_per_param}")


def transfer_time(n_params: int, net: NetworkModel) -> float:
    """Seconds to move one model update across the link."""
    if n_params < 1:
        raise ParamError(f"n_params must be >= 1, got {n_params}")
    bits = n_params * net.bytes_per_param * 8
    return bits / net.bandwidth_bps + net.latency_s
