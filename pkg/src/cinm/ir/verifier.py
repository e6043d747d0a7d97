"""Module verifier: SSA dominance, terminators, per-op checks, dialect checks."""

from __future__ import annotations

from typing import Callable

from .core import OPS, Function, IrModule, Operation, Region, VerifyError

# Function-level structural checks contributed by dialects (e.g. launch/wait ordering).
FUNCTION_CHECKS: list[Callable[[Function], None]] = []


def register_function_check(fn: Callable[[Function], None]) -> Callable[[Function], None]:
    FUNCTION_CHECKS.append(fn)
    return fn


def _verify_region(region: Region, visible: set, fname: str) -> None:
    scope = set(visible)
    scope.update(id(a) for a in region.args)
    for op in region.ops:
        for v in op.operands:
            if id(v) not in scope:
                raise VerifyError(f"@{fname}: operand of {op.name} does not dominate its use")
        opdef = OPS.get(op.name)
        if opdef is None:
            raise VerifyError(f"unknown operation {op.name}")
        if opdef.terminator and op is not region.ops[-1]:
            raise VerifyError(f"{op.name} must terminate its region")
        for r in op.regions:
            _verify_region(r, scope, fname)
        if opdef.verify is not None:
            opdef.verify(op)
        scope.update(id(r) for r in op.results)


def verify_function(f: Function) -> None:
    _verify_region(f.body, set(), f.name)
    term = f.body.terminator
    if term is None or term.name != "return":
        raise VerifyError(f"@{f.name}: function body must end with return")
    got = [v.type for v in term.operands]
    if got != list(f.result_types):
        raise VerifyError(
            f"@{f.name}: return types ({', '.join(map(str, got))}) do not match "
            f"signature ({', '.join(map(str, f.result_types))})"
        )
    for check in FUNCTION_CHECKS:
        check(f)


def verify_module(m: IrModule) -> None:
    seen = set()
    for f in m.functions:
        if f.name in seen:
            raise VerifyError(f"duplicate function name @{f.name}")
        seen.add(f.name)
        verify_function(f)


def expect(cond: bool, op: Operation, message: str) -> None:
    if not cond:
        raise VerifyError(f"{op.name}: {message}")
