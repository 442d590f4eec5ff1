"""Map attention blocks onto a tiled NPU as folded (fused) operators and cost them."""

from .hw import KernelGranularity, NpuConfig, Settings, default_xdna2_config, round_up

__version__ = "0.1.0"

__all__ = ["KernelGranularity", "NpuConfig", "Settings", "default_xdna2_config", "round_up"]
