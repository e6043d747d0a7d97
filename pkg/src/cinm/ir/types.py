"""Type system for the IR: tensors, memrefs, index and dialect handle types."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum


class ElementKind(str, Enum):
    i32 = "i32"
    i1 = "i1"

    def __str__(self) -> str:
        return self.value


I32 = ElementKind.i32
I1 = ElementKind.i1


def _dims(shape) -> str:
    return "x".join(str(d) for d in shape)


class Type:
    """Base class of every IR type."""


@dataclass(frozen=True)
class TensorType(Type):
    shape: tuple
    elem: ElementKind = I32

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "elem", ElementKind(self.elem))
        if any(d < 0 for d in self.shape):
            raise ValueError(f"negative extent in {self.shape}")

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)

    def __str__(self) -> str:
        if not self.shape:
            return f"tensor<{self.elem}>"
        return f"tensor<{_dims(self.shape)}x{self.elem}>"


@dataclass(frozen=True)
class MemRefType(Type):
    shape: tuple
    elem: ElementKind = I32
    space: str = ""

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "elem", ElementKind(self.elem))

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)

    def as_tensor(self) -> TensorType:
        return TensorType(self.shape, self.elem)

    def __str__(self) -> str:
        body = f"{_dims(self.shape)}x{self.elem}" if self.shape else str(self.elem)
        if self.space:
            body += f", {self.space}"
        return f"memref<{body}>"


@dataclass(frozen=True)
class IndexType(Type):
    def __str__(self) -> str:
        return "index"


INDEX = IndexType()


@dataclass(frozen=True)
class WorkgroupType(Type):
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def leaf_count(self) -> int:
        return math.prod(self.dims)

    def __str__(self) -> str:
        return f"!cnm.workgroup<{_dims(self.dims)}>"


@dataclass(frozen=True)
class BufferType(Type):
    """Opaque distributed buffer: per-leaf shape, owning workgroup shape, tree level.

    Level 0 is the root (one instance shared by every leaf); level len(wg) is
    the leaf level (one instance per leaf).
    """

    shape: tuple
    elem: ElementKind
    wg: tuple
    level: int

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "elem", ElementKind(self.elem))
        object.__setattr__(self, "wg", tuple(int(d) for d in self.wg))

    @property
    def view_type(self) -> TensorType:
        return TensorType(self.shape, self.elem)

    @property
    def instances(self) -> int:
        return math.prod(self.wg[: self.level])

    def __str__(self) -> str:
        return f"!cnm.buffer<{self.view_type.__str__()[7:-1]}, {_dims(self.wg)}, {self.level}>"


@dataclass(frozen=True)
class OpaqueType(Type):
    """Handle types such as !cnm.token or !cim.device<128x128>."""

    name: str
    params: tuple = ()

    def __str__(self) -> str:
        if self.params:
            return f"!{self.name}<{_dims(self.params)}>"
        return f"!{self.name}"


def is_tensor_like(t: Type) -> bool:
    return isinstance(t, (TensorType, MemRefType))


def shape_of(t: Type) -> tuple:
    if isinstance(t, (TensorType, MemRefType)):
        return t.shape
    raise TypeError(f"{t} has no shape")
