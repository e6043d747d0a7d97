"""Reference interpreter shared by every dialect level.

Runtime values: tensors are int32 numpy arrays (i1 data stored as 0/1),
index values are Python ints, memrefs are mutable numpy arrays and device
handles are plain objects owned by the dialect runtimes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ir import Function, IRError, Operation, Region, TensorType
from .ir.types import ElementKind

Handler = Callable[["Interpreter", Operation, list, dict], list]
HANDLERS: dict[str, Handler] = {}


class ExecutionError(IRError):
    pass


def handler(*names: str):
    def deco(fn: Handler) -> Handler:
        for n in names:
            HANDLERS[n] = fn
        return fn

    return deco


def wrap32(x) -> np.ndarray:
    """Reduce an integer array modulo 2**32 into int32 (two's complement)."""
    return np.asarray(x).astype(np.int64, copy=False).astype(np.int32)


@dataclass
class TensorValue:
    type: TensorType
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.size != self.type.element_count:
            raise ValueError(f"data has {arr.size} elements, {self.type} needs {self.type.element_count}")
        arr = wrap32(arr.astype(np.int64, copy=False).reshape(self.type.shape))
        if self.type.elem == ElementKind.i1 and not np.isin(arr, (0, 1)).all():
            raise ValueError("i1 tensor holds values other than 0/1")
        self.data = arr

    @classmethod
    def of(cls, values, elem: ElementKind = ElementKind.i32) -> "TensorValue":
        arr = np.asarray(values, dtype=np.int64)
        return cls(TensorType(arr.shape, elem), arr)

    def tolist(self):
        return self.data.tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorValue):
            return NotImplemented
        return self.type == other.type and np.array_equal(self.data, other.data)


class Interpreter:
    """Executes functions op by op.

    ``leaf_order`` ("forward"/"reverse") controls the order in which workgroup
    leaves and tasklets are evaluated; results must not depend on it.
    """

    def __init__(self, leaf_order: str = "forward", cim_pool: int = 4):
        self.leaf_order = leaf_order
        self.cim_pool = cim_pool
        self.runtimes: dict[str, object] = {}

    def runtime(self, key: str, factory: Callable[[], object]):
        rt = self.runtimes.get(key)
        if rt is None:
            rt = self.runtimes[key] = factory()
        return rt

    def ordered(self, seq):
        seq = list(seq)
        return seq[::-1] if self.leaf_order == "reverse" else seq

    def call(self, func: Function, args: list) -> list:
        if len(args) != len(func.args):
            raise ExecutionError(f"@{func.name} expects {len(func.args)} arguments, got {len(args)}")
        for a, v in zip(func.args, args):
            if isinstance(a.type, TensorType) and tuple(np.shape(v)) != a.type.shape:
                raise ExecutionError(f"@{func.name}: argument shape {np.shape(v)} does not match {a.type}")
        return self.run_region(func.body, args, {})

    def run_region(self, region: Region, args: list, env: dict | None = None) -> list:
        """Run ``region``; ``env=None`` isolates it from the enclosing scope."""
        if env is None:
            env = {}
        for a, v in zip(region.args, args):
            env[a] = v
        return self.run_ops(region.ops, env)

    def run_ops(self, ops, env: dict) -> list:
        """Run a straight-line slice of a region; returns the terminator's values."""
        for op in ops:
            name = op.name
            if name == "yield" or name == "return":
                return [env[v] for v in op.operands]
            vals = [env[v] for v in op.operands]
            try:
                h = HANDLERS[name]
            except KeyError:
                raise ExecutionError(f"no interpreter semantics for {name}") from None
            res = h(self, op, vals, env)
            if res:
                for r, v in zip(op.results, res):
                    env[r] = v
        return []


def to_runtime(arg) -> np.ndarray:
    if isinstance(arg, TensorValue):
        return arg.data
    return wrap32(np.asarray(arg, dtype=np.int64))


def run_function(func: Function, args: list, interp: Interpreter | None = None) -> list[TensorValue]:
    """Run ``func`` on tensors (TensorValue or array-likes); returns TensorValues."""
    interp = interp or Interpreter()
    outs = interp.call(func, [to_runtime(a) for a in args])
    return [TensorValue(t, np.asarray(v)) for t, v in zip(func.result_types, outs)]
