"""Memristor crossbar device dialect, its functional simulator and the
cim -> memristor lowering.

The simulator is exact: a crossbar holds an i32 matrix and a read is an
integer matrix-vector (or matrix-matrix) product with i32 wraparound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dialects.cim import DEFAULT_POOL, DEFAULT_XBAR, kernel_of, programmed_operand
from ..interp import ExecutionError, Interpreter, handler, run_function, wrap32
from ..ir import (
    Builder,
    CapacityError,
    Function,
    IrModule,
    OpaqueType,
    Operation,
    Region,
    ResourceError,
    TensorType,
    VerifyError,
    register_function_check,
    register_op,
    register_pass,
    replace_all_uses,
    rewrite_op,
)
from ..ir.core import defined_in, root_region, uses
from ..ir.verifier import expect
from ..rewrites import rewrite_contraction_to_gemm, rewrite_conv2d_to_gemm
from ..targetsel import CostEstimate, register_cost_model, unsupported

ELEM_BYTES = 4


def crossbar_type(rows: int, cols: int) -> OpaqueType:
    return OpaqueType("memristor.crossbar", (rows, cols))


def _is_xbar(t) -> bool:
    return isinstance(t, OpaqueType) and t.name == "memristor.crossbar" and len(t.params) == 2


def _tensor(v, rank=None) -> bool:
    return isinstance(v.type, TensorType) and (rank is None or v.type.rank == rank)


# ---------------------------------------------------------------- ops


def _v_checkout(op):
    expect(not op.operands and len(op.results) == 1 and _is_xbar(op.result.type), op,
           "returns a !memristor.crossbar")


def _v_checkin(op):
    expect(len(op.operands) == 1 and _is_xbar(op.operands[0].type), op, "expects one crossbar")


def _v_copy(op):
    expect(len(op.operands) == 1 and _tensor(op.operands[0]) and op.result.type == op.operands[0].type, op,
           "copies one tensor unchanged")


def _v_write(op):
    expect(len(op.operands) == 2 and _is_xbar(op.operands[0].type) and _tensor(op.operands[1], 2), op,
           "expects (crossbar, rank-2 tile)")
    rows, cols = op.operands[0].type.params
    tr, tc = op.operands[1].type.shape
    if tr > rows or tc > cols:
        raise CapacityError(f"memristor.write_to_crossbar: tile {tr}x{tc} exceeds crossbar {rows}x{cols}")


def _v_gemv_read(op):
    expect(len(op.operands) == 2 and _is_xbar(op.operands[0].type) and _tensor(op.operands[1], 1), op,
           "expects (crossbar, vector)")
    rows, cols = op.operands[0].type.params
    expect(op.operands[1].type.shape[0] <= cols and _tensor(op.result, 1) and op.result.type.shape[0] <= rows, op,
           "vector or result exceeds the crossbar")


def _v_gemm_read(op):
    expect(len(op.operands) == 2 and _is_xbar(op.operands[0].type) and _tensor(op.operands[1], 2), op,
           "expects (crossbar, matrix)")
    rows, cols = op.operands[0].type.params
    t, k = op.operands[1].type.shape
    expect(k <= rows and _tensor(op.result, 2) and op.result.type.shape[0] == t and op.result.type.shape[1] <= cols,
           op, "matrix or result exceeds the crossbar")


register_op("memristor.checkout", _v_checkout, pure=False)
register_op("memristor.checkin", _v_checkin, pure=False)
register_op("memristor.copy_tile", _v_copy, pure=False)
register_op("memristor.store_tile", _v_copy, pure=False)
register_op("memristor.write_to_crossbar", _v_write, pure=False)
register_op("memristor.gemv_read", _v_gemv_read, pure=False)
register_op("memristor.gemm_read", _v_gemm_read, pure=False)

READS = ("memristor.gemv_read", "memristor.gemm_read")


@register_function_check
def _no_read_before_write(f: Function) -> None:
    # Program order is textual order; a write anywhere earlier (including an
    # enclosing loop body) programs the crossbar for later reads.
    written = set()
    for op in f.walk():
        if op.name == "memristor.write_to_crossbar":
            written.add(op.operands[0])
        elif op.name in READS and op.operands[0] not in written:
            raise VerifyError("memristor: crossbar read before write")


def peak_checkouts(region: Region, held: int = 0) -> int:
    """Most crossbars held at once while running ``region`` (loop bodies are
    assumed to return every crossbar they check out)."""
    best = held
    for op in region.ops:
        if op.name == "memristor.checkout":
            held += 1
            best = max(best, held)
        elif op.name == "memristor.checkin":
            held -= 1
        for r in op.regions:
            best = max(best, peak_checkouts(r, held))
    return best


# ---------------------------------------------------------------- simulator


@dataclass
class CrossbarState:
    id: int
    rows: int = 0
    cols: int = 0
    programmed: np.ndarray | None = None
    held: bool = False
    write_count: int = 0
    read_count: int = 0
    mvm_count: int = 0


@dataclass
class MemristorMetrics:
    crossbar_writes: int = 0
    crossbar_reads: int = 0
    crossbar_mvms: int = 0
    host_to_device_bytes: int = 0
    device_to_host_bytes: int = 0
    per_device: list = field(default_factory=list)

    def counters(self) -> dict:
        return {
            "crossbar_writes": self.crossbar_writes,
            "crossbar_reads": self.crossbar_reads,
            "crossbar_mvms": self.crossbar_mvms,
            "host_to_device_bytes": self.host_to_device_bytes,
            "device_to_host_bytes": self.device_to_host_bytes,
        }


class MemristorRuntime:
    def __init__(self, pool: int):
        if pool <= 0:
            raise ResourceError("crossbar pool must hold at least one crossbar")
        self.crossbars = [CrossbarState(i) for i in range(pool)]
        self.h2d = 0
        self.d2h = 0

    def checkout(self, rows, cols) -> CrossbarState:
        for x in self.crossbars:
            if not x.held:
                x.held, x.rows, x.cols, x.programmed = True, rows, cols, None
                return x
        raise ResourceError(f"no free crossbar (pool of {len(self.crossbars)})")

    def checkin(self, x: CrossbarState) -> None:
        if not x.held:
            raise ResourceError(f"checkin of crossbar {x.id} which is not checked out")
        x.held, x.programmed = False, None

    def write(self, x: CrossbarState, tile: np.ndarray) -> None:
        self._owned(x)
        if tile.shape[0] > x.rows or tile.shape[1] > x.cols:
            raise ResourceError(f"tile {tile.shape[0]}x{tile.shape[1]} exceeds crossbar {x.rows}x{x.cols}")
        x.programmed = np.array(tile, dtype=np.int32)
        x.write_count += 1

    def _programmed(self, x: CrossbarState) -> np.ndarray:
        self._owned(x)
        if x.programmed is None:
            raise ExecutionError(f"crossbar {x.id}: read before write")
        return x.programmed.astype(np.int64)

    def gemv_read(self, x: CrossbarState, v: np.ndarray) -> np.ndarray:
        out = wrap32(self._programmed(x) @ v.astype(np.int64))
        x.read_count += 1
        x.mvm_count += 1
        return out

    def gemm_read(self, x: CrossbarState, a: np.ndarray) -> np.ndarray:
        # Each row of ``a`` is streamed through the crossbar as one input vector.
        out = wrap32(a.astype(np.int64) @ self._programmed(x))
        x.read_count += 1
        x.mvm_count += a.shape[0]
        return out

    def _owned(self, x: CrossbarState) -> None:
        if not x.held:
            raise ResourceError(f"crossbar {x.id} used while not checked out")

    def metrics(self) -> MemristorMetrics:
        xs = self.crossbars
        return MemristorMetrics(
            sum(x.write_count for x in xs), sum(x.read_count for x in xs), sum(x.mvm_count for x in xs),
            self.h2d, self.d2h, [(x.write_count, x.read_count) for x in xs],
        )


def runtime_of(interp) -> MemristorRuntime:
    return interp.runtime("memristor", lambda: MemristorRuntime(interp.cim_pool))


@handler("memristor.checkout")
def _checkout(interp, op, vals, env):
    return [runtime_of(interp).checkout(*op.result.type.params)]


@handler("memristor.checkin")
def _checkin(interp, op, vals, env):
    runtime_of(interp).checkin(vals[0])
    return []


@handler("memristor.copy_tile")
def _copy_tile(interp, op, vals, env):
    runtime_of(interp).h2d += vals[0].size * ELEM_BYTES
    return [np.array(vals[0])]


@handler("memristor.store_tile")
def _store_tile(interp, op, vals, env):
    runtime_of(interp).d2h += vals[0].size * ELEM_BYTES
    return [np.array(vals[0])]


@handler("memristor.write_to_crossbar")
def _write(interp, op, vals, env):
    runtime_of(interp).write(vals[0], vals[1])
    return []


@handler("memristor.gemv_read")
def _gemv_read(interp, op, vals, env):
    return [runtime_of(interp).gemv_read(vals[0], vals[1])]


@handler("memristor.gemm_read")
def _gemm_read(interp, op, vals, env):
    return [runtime_of(interp).gemm_read(vals[0], vals[1])]


def simulate(m: IrModule, args, pool: int = DEFAULT_POOL, fn: str = "main"):
    """Run ``fn`` on the crossbar simulator; returns (results, metrics)."""
    interp = Interpreter(cim_pool=pool)
    out = run_function(m.function(fn), args, interp)
    rt = interp.runtimes.get("memristor") or MemristorRuntime(pool)
    return out, rt.metrics()


# ---------------------------------------------------------------- lowering


def _write_anchor(ex: Operation, dev, tile) -> Operation:
    """The op before which the crossbar should be programmed: the outermost
    enclosing loop that defines neither the device nor the tile, so that a
    tile reused across iterations is written once."""
    anchor, region = ex, ex.parent
    while region.parent_op is not None and region.parent_op.name == "for":
        if defined_in(dev, region) or defined_in(tile, region):
            break
        anchor, region = region.parent_op, region.parent_op.parent
    return anchor


def _lower_execute(ex: Operation) -> None:
    dev, *ins = ex.operands
    kernel = kernel_of(ex)
    p = programmed_operand(kernel)
    tile, streamed = ins[p], ins[1 - p]
    sole_user = sum(o.name == "cim.execute" for o in uses(root_region(ex), dev)) == 1
    anchor = _write_anchor(ex, dev, tile) if sole_user else ex
    b = Builder(anchor.parent, anchor.parent.ops.index(anchor))
    staged = b("memristor.copy_tile", [tile], tile.type)
    b.create("memristor.write_to_crossbar", [dev, staged])
    b = Builder(ex.parent, ex.parent.ops.index(ex))
    x = b("memristor.copy_tile", [streamed], streamed.type)
    read = "memristor.gemm_read" if kernel.mnemonic == "gemm" else "memristor.gemv_read"
    r = b(read, [dev, x], kernel.result.type)
    out = b("memristor.store_tile", [r], r.type)
    replace_all_uses(root_region(ex), ex.results[1], out)
    ex.parent.ops.remove(ex)


def lower_function(f: Function, pool: int) -> None:
    ops = list(f.walk())
    for op in ops:
        if op.name == "cim.barrier":
            op.parent.ops.remove(op)
    for op in ops:
        if op.name == "cim.execute":
            _lower_execute(op)
    for op in ops:
        if op.name == "cim.acquire":
            rewrite_op(op, lambda b: b("memristor.checkout", [], crossbar_type(*op.result.type.params)))
        elif op.name == "cim.release":
            rewrite_op(op, lambda b: b.create("memristor.checkin", op.operands) and [])
    need = peak_checkouts(f.body)
    if need > pool:
        raise ResourceError(f"memristor: pool exhausted: @{f.name} holds {need} crossbars at once, pool has {pool}")


@register_pass("cim-to-memristor")
def lower_cim_to_memristor(m: IrModule, pool=str(DEFAULT_POOL)) -> IrModule:
    pool = int(pool)
    if pool <= 0:
        raise VerifyError("cim-to-memristor: pool must be positive")
    for f in m.functions:
        lower_function(f, pool)
    return m


# ---------------------------------------------------------------- cost model


def _tiles(n: int, t: int) -> int:
    return -(-n // t)


def gemm_costs(m: int, k: int, n: int, xbar=DEFAULT_XBAR, min_writes: bool = True) -> dict:
    """Closed-form counters of a crossbar-tiled gemm (B tiles programmed)."""
    r, c = xbar
    reads = _tiles(m, r) * _tiles(k, r) * _tiles(n, c)
    writes = _tiles(k, r) * _tiles(n, c) if min_writes else reads
    a, b, out = min(m, r) * min(k, r), min(k, r) * min(n, c), min(m, r) * min(n, c)
    return {"crossbar_writes": writes, "crossbar_reads": reads, "crossbar_mvms": reads * min(m, r),
            "host_to_device_bytes": ELEM_BYTES * (writes * b + reads * a),
            "device_to_host_bytes": ELEM_BYTES * reads * out}


def gemv_costs(m: int, k: int, xbar=DEFAULT_XBAR) -> dict:
    """Closed-form counters of a crossbar-tiled gemv (A tiles programmed)."""
    r, c = xbar
    reads = _tiles(m, r) * _tiles(k, c)
    return {"crossbar_writes": reads, "crossbar_reads": reads, "crossbar_mvms": reads,
            "host_to_device_bytes": ELEM_BYTES * reads * (min(m, r) * min(k, c) + min(k, c)),
            "device_to_host_bytes": ELEM_BYTES * reads * min(m, r)}


def _crossbar_work(op: Operation, xbar, min_writes) -> list[dict] | None:
    name = op.mnemonic
    if any(v.type.element_count == 0 for v in op.operands):
        return []
    if name == "gemm":
        (m, k), (_, n) = (v.type.shape for v in op.operands)
        return [gemm_costs(m, k, n, xbar, min_writes)]
    if name == "gemv":
        return [gemv_costs(*op.operands[0].type.shape, xbar)]
    if name == "popcount":
        return [gemv_costs(1, op.operands[0].type.element_count, xbar)]
    if name == "simSearch" and str(op.attrs["metric"]) == "dot":
        return [gemv_costs(*op.operands[1].type.shape, xbar)]
    if name in ("conv2d", "contract"):
        m = IrModule([Function("f", Region([v.type for v in op.operands]), [])])
        Builder(m.functions[0].body).create(op.name, m.functions[0].args, [r.type for r in op.results], dict(op.attrs))
        rewrite_contraction_to_gemm(rewrite_conv2d_to_gemm(m))
        return [w for g in m.walk() if g.name == "cinm.gemm" for w in _crossbar_work(g, xbar, min_writes)]
    return None  # stays on the host in the cim lowering


@register_cost_model("memristor", "cim")
def estimate_memristor(op: Operation, spec: dict) -> CostEstimate:
    xbar = tuple(spec.get("xbar", DEFAULT_XBAR))
    work = _crossbar_work(op, xbar, spec.get("min_writes", True))
    if work is None:
        return unsupported("memristor")
    total = CostEstimate("memristor")
    for w in work:
        total = total + CostEstimate("memristor", w["host_to_device_bytes"] + w["device_to_host_bytes"],
                                     w["crossbar_writes"], w["crossbar_reads"])
    return total
