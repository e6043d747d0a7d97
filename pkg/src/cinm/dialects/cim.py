"""The ``cim`` dialect: device acquisition, asynchronous tile execution and
barriers, over a pool of fixed-geometry crossbar devices."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..interp import handler
from ..ir import CapacityError, Function, OpaqueType, Operation, ResourceError, VerifyError, register_function_check, register_op
from ..ir.core import defined_in
from ..ir.verifier import expect

TOKEN = OpaqueType("cim.token")
DEFAULT_XBAR = (128, 128)
DEFAULT_POOL = 4


def device_type(rows: int, cols: int) -> OpaqueType:
    return OpaqueType("cim.device", (rows, cols))


def is_device(t) -> bool:
    return isinstance(t, OpaqueType) and t.name == "cim.device" and len(t.params) == 2


# ---------------------------------------------------------------- device pool


@dataclass
class Device:
    id: int
    state: str = "free"  # free | acquired | programmed
    tile: object = None  # runtime array currently held by the crossbar


@dataclass
class DevicePool:
    """Single-owner lock over ``size`` devices; lowest free id wins."""

    size: int = DEFAULT_POOL
    devices: list = field(default_factory=list)
    executions: int = 0
    writes: int = 0
    peak: int = 0

    def __post_init__(self):
        if self.size <= 0:
            raise ResourceError("device pool must hold at least one device")
        self.devices = [Device(i) for i in range(self.size)]

    def acquire(self) -> Device:
        for d in self.devices:
            if d.state == "free":
                d.state = "acquired"
                self.peak = max(self.peak, self.in_use())
                return d
        raise ResourceError(f"no free device (pool of {self.size})")

    def release(self, dev: Device) -> None:
        if dev.state == "free":
            raise ResourceError(f"release of device {dev.id} which is not acquired")
        dev.state = "free"
        dev.tile = None

    def in_use(self) -> int:
        return sum(d.state != "free" for d in self.devices)


# ---------------------------------------------------------------- ops


def programmed_operand(kernel: Operation) -> int:
    """Index of the kernel operand held by the crossbar: the right matrix of
    a gemm, the matrix of a gemv. The other operand streams through."""
    return 1 if kernel.mnemonic == "gemm" else 0


def kernel_of(execute: Operation) -> Operation:
    return next(op for op in execute.regions[0].ops if op.dialect == "cinm")


def _v_acquire(op):
    expect(not op.operands and len(op.results) == 1 and is_device(op.result.type), op,
           "takes no operands and returns a !cim.device")
    rows, cols = op.result.type.params
    expect(rows > 0 and cols > 0, op, "crossbar extents must be positive")


def _v_release(op):
    expect(len(op.operands) == 1 and is_device(op.operands[0].type) and not op.results, op,
           "expects one device operand")


def _v_execute(op):
    expect(len(op.operands) >= 2 and is_device(op.operands[0].type), op, "expects (device, operands...)")
    expect(len(op.regions) == 1, op, "needs a body region")
    body = op.regions[0]
    expect([a.type for a in body.args] == [v.type for v in op.operands[1:]], op,
           "region arguments must mirror the tile operands")
    kernels = [k for k in body.ops if k.name != "yield"]
    expect(len(kernels) == 1 and kernels[0].name in ("cinm.gemm", "cinm.gemv"), op,
           "body must hold exactly one cinm.gemm or cinm.gemv")
    kernel = kernels[0]
    expect(all(defined_in(v, body) for v in kernel.operands), op, "body may only use its region arguments")
    term = body.terminator
    expect(term is not None and term.name == "yield" and len(term.operands) == 1, op, "body must yield the tile result")
    expect([r.type for r in op.results] == [TOKEN, term.operands[0].type], op,
           "results must be (!cim.token, tile result)")
    rows, cols = op.operands[0].type.params
    tr, tc = kernel.operands[programmed_operand(kernel)].type.shape
    if tr > rows or tc > cols:
        raise CapacityError(f"cim.execute: tile {tr}x{tc} exceeds crossbar {rows}x{cols}")


def _v_barrier(op):
    expect(len(op.operands) == 2 and is_device(op.operands[0].type) and op.operands[1].type == TOKEN, op,
           "expects (device, token)")
    src = op.operands[1].owner
    expect(isinstance(src, Operation) and src.name == "cim.execute" and src.operands[0] is op.operands[0], op,
           "token must come from an execute on the same device")


register_op("cim.acquire", _v_acquire, pure=False)
register_op("cim.release", _v_release, pure=False)
register_op("cim.execute", _v_execute, pure=False)
register_op("cim.barrier", _v_barrier, pure=False)


@register_function_check
def _no_read_before_barrier(f: Function) -> None:
    pending: dict = {}

    def visit(region):
        for op in region.ops:
            for v in op.operands:
                if v in pending and op.name != "cim.barrier":
                    raise VerifyError("cim.execute: result read before barrier")
            if op.name == "cim.execute":
                pending[op.results[1]] = op.results[0]
            elif op.name == "cim.barrier":
                tok = op.operands[1]
                for v in [v for v, t in pending.items() if t is tok]:
                    del pending[v]
            if op.name != "cim.execute":
                for r in op.regions:
                    visit(r)

    visit(f.body)


# ---------------------------------------------------------------- runtime


def pool_of(interp) -> DevicePool:
    return interp.runtime("cim.pool", lambda: DevicePool(interp.cim_pool))


@handler("cim.acquire")
def _acquire(interp, op, vals, env):
    return [pool_of(interp).acquire()]


@handler("cim.release")
def _release(interp, op, vals, env):
    pool_of(interp).release(vals[0])
    return []


@handler("cim.execute")
def _execute(interp, op, vals, env):
    dev = vals[0]
    if dev.state == "free":
        raise ResourceError(f"cim.execute on device {dev.id} which is not acquired")
    pool = pool_of(interp)
    pool.executions += 1
    # The crossbar keeps its tile while the same device runs the same tile value.
    tile = vals[1 + programmed_operand(kernel_of(op))]
    if dev.tile is not tile:
        pool.writes += 1
        dev.tile = tile
    dev.state = "programmed"
    (res,) = interp.run_region(op.regions[0], vals[1:])
    return [object(), res]


@handler("cim.barrier")
def _barrier(interp, op, vals, env):
    return []
