"""Parameterized NPU hardware model and kernel granularity constraints."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError, InvalidGranularityError


@dataclass(frozen=True)
class NpuConfig:
    """Tiled NPU array: a grid of compute cores with per-core L1 and per-tile L2."""

    rows: int = 4
    cols: int = 8
    l1_bytes: int = 64 * 1024
    l2_bytes: int = 512 * 1024
    dram_bw_bytes_per_s: float = 60e9
    peak_ops_per_s: float = 50e12
    dma_min_stride_bytes: int = 4
    dma_pad_dims: int = 3
    elem_bytes: int = 2

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.l1_bytes <= 0:
            raise ConfigError("l1_bytes must be positive")
        if self.l2_bytes < self.l1_bytes:
            raise ConfigError("l2_bytes must be >= l1_bytes")
        if self.dram_bw_bytes_per_s <= 0 or self.peak_ops_per_s <= 0:
            raise ConfigError("bandwidth and peak throughput must be positive")
        if self.dma_min_stride_bytes < 1:
            raise ConfigError("dma_min_stride_bytes must be >= 1")
        if self.dma_pad_dims < 0:
            raise ConfigError("dma_pad_dims must be >= 0")
        if self.elem_bytes not in (1, 2, 4, 8):
            raise ConfigError(f"unsupported elem_bytes {self.elem_bytes}")

    @property
    def num_cores(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class KernelGranularity:
    """Minimum tile extents the precompiled MatMul/SoftMax kernels accept."""

    m_min: int = 8
    k_min: int = 8
    n_min: int = 8
    sm_min: int = 8
    block: int = 8

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise InvalidGranularityError(f"granularity {f.name} must be >= 1")

    @property
    def key_granule(self) -> int:
        """Granule for the key axis: it is the N of Q*K^T, the K of SM*V and the softmax length."""
        return math.lcm(self.n_min, self.k_min, self.sm_min)

    def check_dma(self, cfg: NpuConfig) -> None:
        if self.block * cfg.elem_bytes < cfg.dma_min_stride_bytes:
            raise InvalidGranularityError(
                f"block {self.block} x {cfg.elem_bytes}B is below the "
                f"{cfg.dma_min_stride_bytes}B DMA stride"
            )


def default_xdna2_config() -> NpuConfig:
    """4x8 grid, 64KB L1, 512KB L2, ~60 GB/s DRAM, 50 TOPs, 4B DMA stride."""
    return NpuConfig()


def round_up(dim: int, granule: int) -> int:
    """Smallest multiple of ``granule`` that is >= ``dim``."""
    if granule < 1:
        raise InvalidGranularityError(f"granule must be >= 1, got {granule}")
    if dim < 0:
        raise ValueError(f"dim must be >= 0, got {dim}")
    return -(-dim // granule) * granule


@dataclass(frozen=True)
class Settings:
    """Everything the pipeline consults besides the graph itself."""

    npu: NpuConfig = field(default_factory=default_xdna2_config)
    gran: KernelGranularity = field(default_factory=KernelGranularity)
    buffering: int = 2
    mask_fill: float = -1e9
    verify_tol: float = 1e-9

    def __post_init__(self):
        if self.buffering < 1:
            raise ConfigError("buffering must be >= 1")
        if not self.mask_fill < 0:
            raise ConfigError("mask_fill must be negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "npu": dataclasses.asdict(self.npu),
            "granularity": dataclasses.asdict(self.gran),
            "buffering": self.buffering,
            "mask_fill": self.mask_fill,
            "verify_tol": self.verify_tol,
        }


_NPU_FIELDS = {f.name: f.type for f in dataclasses.fields(NpuConfig)}
_GRAN_FIELDS = {f.name for f in dataclasses.fields(KernelGranularity)}
_TOP_FIELDS = {"buffering": int, "mask_fill": float, "verify_tol": float}


def _coerce(key: str, value: Any, kind: str) -> Any:
    try:
        if kind == "int":
            if isinstance(value, str):
                value = float(value)
            if float(value) != int(value):
                raise ValueError
            return int(value)
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None


def _npu_kind(name: str) -> str:
    return "float" if "float" in str(_NPU_FIELDS[name]) else "int"


def settings_from_dict(doc: Mapping[str, Any]) -> Settings:
    """Build settings from a config document.

    NPU fields may sit at top level or under ``"npu"``; granularity fields live
    under ``"granularity"``.
    """
    if not isinstance(doc, Mapping):
        raise ConfigError("config document must be a JSON object")
    npu: dict[str, Any] = {}
    gran: dict[str, Any] = {}
    top: dict[str, Any] = {}
    for key, value in doc.items():
        if key == "npu":
            if not isinstance(value, Mapping):
                raise ConfigError("'npu' must be an object")
            for k, v in value.items():
                if k not in _NPU_FIELDS:
                    raise ConfigError(f"unknown npu field {k!r}")
                npu[k] = _coerce(k, v, _npu_kind(k))
        elif key == "granularity":
            if not isinstance(value, Mapping):
                raise ConfigError("'granularity' must be an object")
            for k, v in value.items():
                if k not in _GRAN_FIELDS:
                    raise ConfigError(f"unknown granularity field {k!r}")
                gran[k] = _coerce(k, v, "int")
        elif key in _NPU_FIELDS:
            npu[key] = _coerce(key, value, _npu_kind(key))
        elif key in _TOP_FIELDS:
            top[key] = _coerce(key, value, "int" if _TOP_FIELDS[key] is int else "float")
        else:
            raise ConfigError(f"unknown config field {key!r}")
    return Settings(npu=NpuConfig(**npu), gran=KernelGranularity(**gran), **top)


def load_settings(path: str | Path | None) -> Settings:
    if path is None:
        return Settings()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return settings_from_dict(doc)


def apply_overrides(settings: Settings, overrides: Mapping[str, str]) -> Settings:
    """Apply flat ``key=value`` overrides.

    Keys are NPU field names, granularity field names (optionally prefixed
    ``gran.``), or one of ``buffering``, ``mask_fill``, ``verify_tol``.
    """
    npu, gran, top = {}, {}, {}
    for key, raw in overrides.items():
        name = key.split(".", 1)[1] if key.startswith(("gran.", "granularity.", "npu.")) else key
        if key.startswith("npu.") and name not in _NPU_FIELDS:
            raise ConfigError(f"unknown override key {key!r}")
        if name in _NPU_FIELDS and not key.startswith(("gran.", "granularity.")):
            npu[name] = _coerce(key, raw, _npu_kind(name))
        elif name in _GRAN_FIELDS:
            gran[name] = _coerce(key, raw, "int")
        elif name in _TOP_FIELDS and name == key:
            top[name] = _coerce(key, raw, "int" if _TOP_FIELDS[name] is int else "float")
        else:
            raise ConfigError(f"unknown override key {key!r}")
    return dataclasses.replace(
        settings,
        npu=dataclasses.replace(settings.npu, **npu),
        gran=dataclasses.replace(settings.gran, **gran),
        **top,
    )
