"""Device-level configuration shared by the scheduler, channels, and tables."""

from __future__ import annotations

from dataclasses import dataclass, field

from .vm import DEFAULT_HIGH_BASE, DEFAULT_LOW_BASE, PageGeometry


@dataclass(frozen=True)
class DeviceConfig:
    quantum: float = 0.1
    context_switch_penalty: float = 0.0
    hw_max_queues: int = 8          # channels per timeslice group
    ring_capacity: int = 1024       # submission ring entries per channel
    compute_capacity: float = 1.0
    graphics_capacity: float = 1.0
    utilization_sample_dt: float = 0.5
    geometry: PageGeometry = field(default_factory=PageGeometry)
    high_base: int = DEFAULT_HIGH_BASE
    low_base: int = DEFAULT_LOW_BASE

    # Diagnostic knobs. Each one removes a coherence step so tests can show
    # the failure it normally prevents; all default off.
    disable_graft: bool = False
    disable_tlb_propagation: bool = False
    skip_bootstrap: bool = False

    def __post_init__(self):
        if self.quantum <= 0:
            raise ValueError("quantum must be positive")
        if self.context_switch_penalty < 0:
            raise ValueError("context_switch_penalty must be >= 0")
        if self.hw_max_queues < 2:
            raise ValueError("need at least one app queue and one spare")
        if self.ring_capacity < 2:
            raise ValueError("ring_capacity must be >= 2")
        if self.compute_capacity <= 0 or self.graphics_capacity <= 0:
            raise ValueError("resource capacities must be positive")
        if self.utilization_sample_dt <= 0:
            raise ValueError("utilization_sample_dt must be positive")
