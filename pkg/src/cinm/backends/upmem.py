"""UPMEM device dialect and its functional simulator.

Workgroup levels map right-aligned onto (rank, dpu, tasklet): the last level
is always the tasklet level, the level before it selects DPUs. Every DPU owns
a word-addressed MRAM holding one instance of each buffer per tasklet (leaf
buffers) or a single instance (everything above the leaf level). Tasklets
move data between MRAM and their private WRAM slice with aligned DMA.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from ..dialects import cinm as C
from ..dialects.cnm import AffineMap
from ..interp import ExecutionError, Interpreter, handler, run_function
from ..ir import (
    INDEX,
    CapacityError,
    IrModule,
    MemRefType,
    OpaqueType,
    Operation,
    ResourceError,
    TensorType,
    VerifyError,
    register_op,
)
from ..ir.core import defined_in
from ..ir.verifier import expect
from ..xform import trip_count

WORD = 4  # bytes per stored element; i1 data is widened to a word
DMA_ALIGN = 8
OP_BYTES = 8  # instruction-memory proxy: one 64-bit instruction per IR op


@dataclass(frozen=True)
class UpmemSpec:
    dpus_per_rank: int = 128
    ranks: int = 16
    tasklets_per_dpu: int = 16
    wram_bytes: int = 64 * 1024
    mram_bytes: int = 64 * 1024 * 1024
    iram_bytes: int = 4 * 1024

    def attrs(self) -> dict:
        return {"dpus": self.dpus_per_rank, "ranks": self.ranks, "tasklets": self.tasklets_per_dpu,
                "wram": self.wram_bytes, "mram": self.mram_bytes, "iram": self.iram_bytes}


def grid_type(wg) -> OpaqueType:
    return OpaqueType("upmem.grid", tuple(wg))


def mram_type(pshape) -> OpaqueType:
    return OpaqueType("upmem.mram", tuple(pshape))


def _is(t, name) -> bool:
    return isinstance(t, OpaqueType) and t.name == name


def placement(wg) -> tuple[tuple, int]:
    """(DPU grid extents, tasklets per DPU) for workgroup extents ``wg``."""
    return tuple(wg[:-1]), wg[-1]


def wram_slice(spec_wram: int, wg) -> int:
    # WRAM is split evenly between the tasklets a DPU actually runs.
    return spec_wram // wg[-1]


# ---------------------------------------------------------------- ops


def _v_alloc_dpus(op):
    wg = op.attrs.get("wg")
    expect(isinstance(wg, list) and 1 <= len(wg) <= 3 and min(wg) > 0, op,
           "workgroup must have 1 to 3 positive levels (rank, dpu, tasklet)")
    expect(op.result.type == grid_type(wg), op, "result must be !upmem.grid of the workgroup extents")
    a = op.attrs
    caps = [a["ranks"], a["dpus"], a["tasklets"]][3 - len(wg):]
    names = ["ranks", "DPUs per rank", "tasklets per DPU"][3 - len(wg):]
    for ext, cap, what in zip(wg, caps, names):
        if ext > cap:
            raise CapacityError(f"upmem.alloc_dpus: workgroup needs {ext} {what}, only {cap} available")


def _v_mram_alloc(op):
    expect(len(op.operands) == 1 and _is(op.operands[0].type, "upmem.grid"), op, "expects a grid")
    a = op.attrs
    for key in ("level", "base", "instances"):
        expect(isinstance(a.get(key), int) and a[key] >= 0, op, f"needs non-negative '{key}'")
    pshape = op.result.type.params
    expect(_is(op.result.type, "upmem.mram") and prod(pshape) % 2 == 0, op,
           "instances must hold an even number of words (8-byte DMA granules)")
    expect(a["base"] % (DMA_ALIGN // WORD) == 0, op, "base must be 8-byte aligned")


def _v_copy_to(op):
    expect(len(op.operands) == 3 and isinstance(op.operands[1].type, TensorType)
           and _is(op.operands[2].type, "upmem.mram"), op, "expects (grid, host tensor, mram buffer)")
    AffineMap.parse(op.attrs.get("map", ""))


def _v_copy_from(op):
    expect(len(op.operands) == 2 and _is(op.operands[1].type, "upmem.mram"), op, "expects (grid, mram buffer)")
    AffineMap.parse(op.attrs.get("map", ""))


def _v_tasklet_id(op):
    expect(op.result.type == INDEX and isinstance(op.attrs.get("level"), int), op, "needs 'level'")


def _v_wram_alloc(op):
    t = op.result.type
    expect(isinstance(t, MemRefType) and t.space == "wram", op, "result must be a wram memref")


def _v_dma(op):
    expect(len(op.operands) == 3 and _is(op.operands[0].type, "upmem.mram")
           and isinstance(op.operands[1].type, MemRefType) and op.operands[2].type == INDEX, op,
           "expects (mram buffer, wram memref, byte offset)")
    rows, row_bytes, stride = (op.attrs.get(k) for k in ("rows", "row_bytes", "stride"))
    expect(all(isinstance(x, int) and x > 0 for x in (rows, row_bytes, stride)), op, "needs rows/row_bytes/stride")
    for what, n in (("transfer", row_bytes), ("stride", stride)):
        if n % DMA_ALIGN:
            raise VerifyError(f"{op.name}: misaligned {what} of {n} bytes (DMA needs multiples of {DMA_ALIGN})")
    expect(rows * row_bytes <= op.operands[1].type.element_count * WORD, op, "transfer larger than the WRAM buffer")


def wram_bytes(body) -> int:
    return sum(o.result.type.element_count * WORD for o in body.walk() if o.name == "upmem.wram_alloc")


def _v_launch(op):
    expect(op.operands and _is(op.operands[0].type, "upmem.grid"), op, "first operand must be the grid")
    expect(len(op.regions) == 1, op, "needs a tasklet program")
    body = op.regions[0]
    expect([a.type for a in body.args] == [v.type for v in op.operands[1:]], op,
           "region arguments must mirror the mram buffers")
    for inner in body.walk():
        expect(inner.dialect not in ("cinm", "cnm", "cim", "memristor") and inner.name != "upmem.launch", op,
               f"{inner.name} is not allowed in a tasklet program")
        if inner.name == "upmem.barrier_wait":
            expect(inner.parent is body, op, "barrier_wait must be at the top level of the program")
        for v in inner.operands:
            expect(defined_in(v, body), op, "the program uses a value defined outside the launch")
    need, have = wram_bytes(body), op.attrs.get("wram_slice", 0)
    if need > have:
        raise CapacityError(f"WRAM overflow: requires {need} bytes, available {have} bytes")
    code = OP_BYTES * sum(1 for _ in body.walk())
    if code > op.attrs.get("iram", code):
        raise CapacityError(f"IRAM overflow: program needs {code} bytes, available {op.attrs['iram']} bytes")


register_op("upmem.alloc_dpus", _v_alloc_dpus, pure=False)
register_op("upmem.mram_alloc", _v_mram_alloc, pure=False)
register_op("upmem.copy_to_mram", _v_copy_to, pure=False)
register_op("upmem.copy_from_mram", _v_copy_from, pure=False)
register_op("upmem.launch", _v_launch, pure=False)
register_op("upmem.tasklet_id", _v_tasklet_id)
register_op("upmem.wram_alloc", _v_wram_alloc, pure=False)
register_op("upmem.mram_read", _v_dma, pure=False)
register_op("upmem.mram_write", _v_dma, pure=False)
register_op("upmem.barrier_wait", pure=False)

# Tasklet arithmetic on WRAM-resident tiles: the cnm-capable cinm kinds.
TASKLET_OPS = tuple(k.value for k in C.CinmOpKind if C.supported(k, "cnm"))
for _k in TASKLET_OPS:
    C.register_compute_op(f"upmem.{_k}")


def to_tasklet_ops(body) -> None:
    """Rename the cinm ops of a tasklet program to their upmem counterparts."""
    for o in body.walk():
        if o.dialect == "cinm":
            if o.mnemonic not in TASKLET_OPS:
                raise VerifyError(f"{o.name} has no tasklet implementation")
            o.name = "upmem." + o.mnemonic


# ---------------------------------------------------------------- simulator


@dataclass
class UpmemMetrics:
    host_to_mram_bytes: int = 0
    mram_to_host_bytes: int = 0
    mram_wram_bytes: int = 0
    launches: int = 0
    barriers: int = 0

    def counters(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Grid:
    wg: tuple
    mram_words: int
    dpus: dict = field(default_factory=dict)  # dpu coords -> MRAM word array
    used: int = 0


@dataclass
class MramBuffer:
    grid: Grid
    base: int  # words
    pshape: tuple
    level: int
    instances: int

    @property
    def words(self) -> int:
        return prod(self.pshape)

    def slot(self, leaf) -> tuple[tuple, int]:
        """(dpu coords, instance) holding the view of leaf coordinates ``leaf``."""
        leaf = tuple(leaf)
        return leaf[:-1], (leaf[-1] if self.level == len(self.grid.wg) else 0)

    def region(self, dpu, inst) -> np.ndarray:
        lo = self.base + inst * self.words
        return self.grid.dpus[dpu][lo: lo + self.words]


class UpmemRuntime:
    def __init__(self):
        self.metrics = UpmemMetrics()
        self.leaf: tuple | None = None  # coordinates of the running tasklet


def runtime_of(interp) -> UpmemRuntime:
    return interp.runtime("upmem", UpmemRuntime)


@handler("upmem.alloc_dpus")
def _alloc_dpus(interp, op, vals, env):
    wg = tuple(op.attrs["wg"])
    dpu_dims, _ = placement(wg)
    g = Grid(wg, op.attrs["mram"] // WORD)
    for d in np.ndindex(*dpu_dims):
        g.dpus[tuple(d)] = np.zeros(0, dtype=np.int32)
    return [g]


@handler("upmem.mram_alloc")
def _mram_alloc(interp, op, vals, env):
    g = vals[0]
    buf = MramBuffer(g, op.attrs["base"], op.result.type.params, op.attrs["level"], op.attrs["instances"])
    end = buf.base + buf.instances * buf.words
    if end > g.mram_words:
        raise ResourceError(f"MRAM overflow: requires {end * WORD} bytes, available {g.mram_words * WORD} bytes")
    for d, mem in g.dpus.items():
        if len(mem) < end:
            g.dpus[d] = np.concatenate([mem, np.zeros(end - len(mem), dtype=np.int32)])
    return [buf]


def stored_shape(view) -> tuple:
    """Scalars are stored as a one-element row."""
    return tuple(view) or (1,)


def _padded(block: np.ndarray, pshape) -> np.ndarray:
    out = np.zeros(pshape, dtype=np.int32)
    block = block.reshape(stored_shape(block.shape))
    out[tuple(slice(0, s) for s in block.shape)] = block
    return out.ravel()


@handler("upmem.copy_to_mram")
def _copy_to_mram(interp, op, vals, env):
    _, host, buf = vals
    view = tuple(op.attrs["view"])
    dom = tuple(buf.grid.wg[: buf.level]) + view
    data = np.zeros(dom, dtype=np.int32)
    if prod(dom):
        coords = domain_coords_of(dom)
        data[tuple(coords)] = host[tuple(AffineMap.parse(op.attrs["map"]).evaluate(coords))]
    rt = runtime_of(interp)
    dpu_dims, tasklets = placement(buf.grid.wg)
    for d in np.ndindex(*dpu_dims):
        for inst in range(buf.instances):
            leaf = tuple(d) + (inst,)
            buf.region(tuple(d), inst)[:] = _padded(data[leaf[: buf.level]], buf.pshape)
            rt.metrics.host_to_mram_bytes += buf.words * WORD
    return []


@handler("upmem.copy_from_mram")
def _copy_from_mram(interp, op, vals, env):
    _, buf = vals
    view = tuple(op.attrs["view"])
    prefix = tuple(buf.grid.wg[: buf.level])
    data = np.zeros(prefix + view, dtype=np.int32)
    rt = runtime_of(interp)
    for p in np.ndindex(*prefix):
        leaf = tuple(p) + (0,) * (len(buf.grid.wg) - buf.level)
        block = buf.region(*buf.slot(leaf)).reshape(buf.pshape)
        data[tuple(p)] = block[tuple(slice(0, s) for s in stored_shape(view))].reshape(view)
        rt.metrics.mram_to_host_bytes += buf.words * WORD
    out = np.zeros(op.result.type.shape, dtype=np.int32)
    if data.size:
        coords = domain_coords_of(data.shape)
        out[tuple(AffineMap.parse(op.attrs["map"]).evaluate(coords))] = data[tuple(coords)]
    return [out]


def domain_coords_of(shape) -> list:
    return [c.ravel() for c in np.indices(shape)] if prod(shape) else [np.zeros(0, int) for _ in shape]


def phases(body) -> list[list[Operation]]:
    """Top-level program split at barrier_wait; the barrier ends its phase."""
    out, cur = [], []
    for op in body.ops:
        if op.name == "yield":
            continue
        cur.append(op)
        if op.name == "upmem.barrier_wait":
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


@handler("upmem.launch")
def _launch(interp, op, vals, env):
    grid, bufs = vals[0], vals[1:]
    rt = runtime_of(interp)
    rt.metrics.launches += 1
    body = op.regions[0]
    dpu_dims, tasklets = placement(grid.wg)
    steps = phases(body)
    for d in interp.ordered(list(np.ndindex(*dpu_dims))):
        envs = {t: dict(zip(body.args, bufs)) for t in range(tasklets)}
        for step in steps:
            # Tasklets of one DPU run round-robin up to the next barrier.
            for t in interp.ordered(range(tasklets)):
                rt.leaf = tuple(d) + (t,)
                interp.run_ops(step, envs[t])
            if step[-1].name == "upmem.barrier_wait":
                rt.metrics.barriers += 1
    rt.leaf = None
    return []


@handler("upmem.tasklet_id")
def _tasklet_id(interp, op, vals, env):
    return [runtime_of(interp).leaf[op.attrs["level"]]]


@handler("upmem.wram_alloc")
def _wram_alloc(interp, op, vals, env):
    return [np.zeros(op.result.type.shape, dtype=np.int32)]


def _dma_words(interp, op, buf, offset):
    rt = runtime_of(interp)
    rows, row_bytes, stride = op.attrs["rows"], op.attrs["row_bytes"], op.attrs["stride"]
    if offset % DMA_ALIGN:
        raise ExecutionError(f"{op.name}: misaligned MRAM offset {offset} at leaf {rt.leaf}")
    dpu, inst = buf.slot(rt.leaf)
    base = buf.base + inst * buf.words
    idx = (base + (offset + np.arange(rows)[:, None] * stride + np.arange(0, row_bytes, WORD)[None, :]) // WORD)
    limit = base + buf.words
    if idx.size and (idx.min() < base or idx.max() >= limit):
        raise ExecutionError(f"{op.name}: MRAM access [{offset}, {offset + (rows - 1) * stride + row_bytes}) "
                             f"out of bounds of a {buf.words * WORD}-byte buffer at leaf {rt.leaf}")
    rt.metrics.mram_wram_bytes += rows * row_bytes
    return grid_memory(buf, dpu), idx.ravel()


def grid_memory(buf, dpu) -> np.ndarray:
    return buf.grid.dpus[dpu]


@handler("upmem.mram_read")
def _mram_read(interp, op, vals, env):
    buf, wram, offset = vals
    mem, idx = _dma_words(interp, op, buf, offset)
    wram.reshape(-1)[: idx.size] = mem[idx]
    return []


@handler("upmem.mram_write")
def _mram_write(interp, op, vals, env):
    buf, wram, offset = vals
    mem, idx = _dma_words(interp, op, buf, offset)
    mem[idx] = wram.reshape(-1)[: idx.size]
    return []


@handler("upmem.barrier_wait")
def _barrier(interp, op, vals, env):
    return []


def simulate(m: IrModule, args, fn: str = "main", leaf_order: str = "forward"):
    """Run ``fn`` on the DPU simulator; returns (results, metrics)."""
    interp = Interpreter(leaf_order=leaf_order)
    out = run_function(m.function(fn), args, interp)
    return out, runtime_of(interp).metrics


def static_counters(m: IrModule, fn: str = "main") -> UpmemMetrics:
    """Traffic counters predicted from the program text alone: every transfer
    op times the trip counts of its enclosing loops (and the leaves of its
    launch). Agrees with ``simulate`` on programs without data-dependent
    control flow."""
    met = UpmemMetrics()

    def visit(region, mult):
        for op in region.ops:
            if op.name == "for":
                visit(op.regions[0], mult * trip_count(op))
            elif op.name == "upmem.copy_to_mram":
                a = op.operands[2].owner.attrs
                dpus = prod(op.operands[0].type.params[:-1])
                met.host_to_mram_bytes += mult * dpus * a["instances"] * prod(op.operands[2].type.params) * WORD
            elif op.name == "upmem.copy_from_mram":
                wg = op.operands[0].type.params
                level = op.operands[1].owner.attrs["level"]
                met.mram_to_host_bytes += mult * prod(wg[:level]) * prod(op.operands[1].type.params) * WORD
            elif op.name == "upmem.launch":
                wg = op.operands[0].type.params
                body = op.regions[0]
                met.launches += mult
                met.barriers += mult * prod(wg[:-1]) * sum(o.name == "upmem.barrier_wait" for o in body.ops)
                visit(body, mult * prod(wg))
            elif op.name in ("upmem.mram_read", "upmem.mram_write"):
                met.mram_wram_bytes += mult * op.attrs["rows"] * op.attrs["row_bytes"]

    visit(m.function(fn).body, 1)
    return met
