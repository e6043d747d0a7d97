"""SSA data model: values, operations, regions, functions and modules."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .types import Type


class IRError(Exception):
    """Base class of diagnostics raised by the compiler."""


class VerifyError(IRError):
    pass


class CapacityError(VerifyError):
    """A program that needs more device memory than the target provides."""


class ResourceError(IRError):
    """A device capacity was exceeded (WRAM, crossbar, device pool)."""


class Token(str):
    """Enum-token attribute value, printed bare (``{op = sum}``)."""

    __slots__ = ()


class Value:
    __slots__ = ("type", "owner", "index", "hint")

    def __init__(self, type: Type, owner=None, index: int = 0, hint: str | None = None):
        self.type = type
        self.owner = owner
        self.index = index
        self.hint = hint

    def __repr__(self) -> str:
        return f"<Value {self.hint or '?'}: {self.type}>"


class Operation:
    __slots__ = ("name", "operands", "results", "attrs", "regions", "parent")

    def __init__(self, name: str, operands=(), result_types=(), attrs=None, regions=()):
        self.name = name
        self.operands: list[Value] = list(operands)
        self.results: list[Value] = [Value(t, self, i) for i, t in enumerate(result_types)]
        self.attrs: dict = dict(attrs or {})
        self.regions: list[Region] = list(regions)
        self.parent: Region | None = None
        for r in self.regions:
            r.parent_op = self

    @property
    def dialect(self) -> str:
        return self.name.split(".", 1)[0] if "." in self.name else ""

    @property
    def mnemonic(self) -> str:
        return self.name.split(".", 1)[1] if "." in self.name else self.name

    @property
    def result(self) -> Value:
        assert len(self.results) == 1, self.name
        return self.results[0]

    def walk(self) -> Iterator["Operation"]:
        yield self
        for r in self.regions:
            yield from r.walk()

    def __repr__(self) -> str:
        return f"<Operation {self.name}>"


class Region:
    """A single-block region: typed arguments followed by a list of operations."""

    __slots__ = ("args", "ops", "parent_op")

    def __init__(self, arg_types=(), ops=None):
        self.args: list[Value] = [Value(t, self, i) for i, t in enumerate(arg_types)]
        self.ops: list[Operation] = []
        self.parent_op: Operation | None = None
        for op in ops or ():
            self.append(op)

    def append(self, op: Operation) -> Operation:
        op.parent = self
        self.ops.append(op)
        return op

    def insert(self, index: int, op: Operation) -> Operation:
        op.parent = self
        self.ops.insert(index, op)
        return op

    def walk(self) -> Iterator[Operation]:
        for op in self.ops:
            yield from op.walk()

    @property
    def terminator(self) -> Operation | None:
        return self.ops[-1] if self.ops else None


@dataclass
class Function:
    name: str
    body: Region
    result_types: list = field(default_factory=list)

    @property
    def args(self) -> list[Value]:
        return self.body.args

    @property
    def arg_types(self) -> list[Type]:
        return [a.type for a in self.body.args]

    def walk(self) -> Iterator[Operation]:
        return self.body.walk()


@dataclass
class IrModule:
    functions: list[Function] = field(default_factory=list)

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def walk(self) -> Iterator[Operation]:
        for f in self.functions:
            yield from f.walk()

    def op_count(self) -> int:
        return sum(1 for _ in self.walk())

    def clone(self) -> "IrModule":
        return copy.deepcopy(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, IrModule):
            return NotImplemented
        from .printer import print_module

        return print_module(self) == print_module(other)

    def __str__(self) -> str:
        from .printer import print_module

        return print_module(self)


# ---------------------------------------------------------------- registry


@dataclass
class OpDef:
    name: str
    verify: Callable[[Operation], None] | None = None
    pure: bool = True
    terminator: bool = False


OPS: dict[str, OpDef] = {}


def register_op(name: str, verify=None, pure: bool = True, terminator: bool = False) -> OpDef:
    d = OpDef(name, verify, pure, terminator)
    OPS[name] = d
    return d


def is_registered(name: str) -> bool:
    return name in OPS


# ---------------------------------------------------------------- helpers


class Builder:
    """Appends operations to a region, optionally at a fixed position."""

    def __init__(self, region: Region, index: int | None = None):
        self.region = region
        self.index = index

    def create(self, name, operands=(), result_types=(), attrs=None, regions=()) -> Operation:
        return self.add(Operation(name, operands, result_types, attrs, regions))

    def add(self, op: Operation) -> Operation:
        if self.index is None:
            return self.region.append(op)
        self.region.insert(self.index, op)
        self.index += 1
        return op

    def __call__(self, name, operands=(), result_type=None, **attrs) -> Value:
        """Create a single-result op and return its value."""
        return self.create(name, operands, [result_type], attrs).result


def replace_all_uses(root, old: Value, new: Value) -> None:
    """Rewrite every use of ``old`` below ``root`` (a region, function or module)."""
    for op in root.walk():
        for i, v in enumerate(op.operands):
            if v is old:
                op.operands[i] = new


def uses(root, value: Value) -> list[Operation]:
    return [op for op in root.walk() if any(v is value for v in op.operands)]


def defined_in(value: Value, region: Region) -> bool:
    """True if ``value`` is defined inside ``region`` (at any depth)."""
    owner = value.owner
    while owner is not None:
        if isinstance(owner, Region):
            if owner is region:
                return True
            owner = owner.parent_op
        elif isinstance(owner, Operation):
            owner = owner.parent
        else:
            return False
    return False


def enclosing_ops(op: Operation) -> list[Operation]:
    """Ancestors of ``op`` from innermost outwards."""
    out = []
    region = op.parent
    while region is not None and region.parent_op is not None:
        out.append(region.parent_op)
        region = region.parent_op.parent
    return out


def root_region(op: Operation) -> Region:
    region = op.parent
    while region.parent_op is not None and region.parent_op.parent is not None:
        region = region.parent_op.parent
    return region


def rewrite_op(op: Operation, build) -> list[Value]:
    """Replace ``op``: ``build(builder)`` emits replacement ops in its place and
    returns one value per result of ``op``."""
    region = op.parent
    b = Builder(region, region.ops.index(op))
    new = build(b)
    new = list(new) if isinstance(new, (list, tuple)) else [new]
    if len(new) != len(op.results):
        raise IRError(f"rewrite of {op.name} produced {len(new)} values for {len(op.results)} results")
    root = root_region(op)
    for old, nv in zip(op.results, new):
        replace_all_uses(root, old, nv)
    region.ops.remove(op)
    return new


def clone_ops(ops, mapping: dict) -> list[Operation]:
    """Deep-copy ``ops``; operands are remapped through ``mapping`` (which is
    extended with every cloned result and region argument)."""
    out = []
    for op in ops:
        regions = []
        for r in op.regions:
            nr = Region([a.type for a in r.args])
            for a, na in zip(r.args, nr.args):
                mapping[a] = na
            for c in clone_ops(r.ops, mapping):
                nr.append(c)
            regions.append(nr)
        new = Operation(op.name, [mapping.get(v, v) for v in op.operands], [v.type for v in op.results],
                        dict(op.attrs), regions)
        for a, b in zip(op.results, new.results):
            mapping[a] = b
        out.append(new)
    return out
