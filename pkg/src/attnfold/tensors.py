"""Tensor descriptors shared by the graph IR and the planners."""

from __future__ import annotations

from dataclasses import dataclass

ROLES = ("Q", "K", "V", "Bias", "Mask", "Intermediate", "Output", "Other")


@dataclass(frozen=True)
class TensorDesc:
    id: str
    dims: tuple[int, ...]
    role: str = "Other"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(x) for x in self.dims))
        if self.role not in ROLES:
            raise ValueError(f"unknown tensor role {self.role!r}")

    @property
    def rank(self) -> int:
        return len(self.dims)

    def nbytes(self, elem_bytes: int) -> int:
        n = elem_bytes
        for x in self.dims:
            n *= x
        return n
