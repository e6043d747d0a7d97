"""cnm -> upmem: workgroups become DPU grids, buffers become MRAM regions and
each launch becomes a tasklet program staging its data through WRAM.

Launch bodies fall into four shapes:
  gemm / gemv  tiled to the tasklet's WRAM slice, loop order recorded on the
               launch so ``upmem-wram-opt`` can reorder it for reuse;
  stream       one elementwise op on vectors, processed chunk by chunk;
  whole        anything else: every view is staged in WRAM at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, prod

from ..backends.upmem import (WORD, UpmemSpec, grid_type, mram_type, static_counters, stored_shape, to_tasklet_ops,
                              wram_slice)
from ..dialects import cinm as C
from ..dialects.cnm import launch_parts
from ..dialects.core import affine, build_for, const, extract, fill, insert, reshape
from ..ir import (
    INDEX,
    Builder,
    CapacityError,
    Function,
    IrModule,
    MemRefType,
    Operation,
    PassFailure,
    Region,
    TensorType,
    VerifyError,
    clone_ops,
    register_pass,
    rewrite_op,
    run_pipeline,
)
from ..targetsel import CostEstimate, register_cost_model, unsupported
from .to_cnm import DEFAULT_WG

DEFAULT_TILE = 32
STREAMABLE = ("add", "sub", "logicop")


def _even(n: int) -> int:
    return n + (n & 1)


def _ceil_to(n: int, m: int) -> int:
    return ceil(n / m) * m


def _default_pshape(view) -> tuple:
    s = stored_shape(view)
    return s[:-1] + (_even(s[-1]),)


@dataclass
class Plan:
    kind: str  # gemm | gemv | stream | whole
    pshapes: list  # one per buffer operand of the launch
    attrs: dict


def _single_op(body: Region, nd: int):
    """The lone cinm op of a body applied to view args, or None."""
    ops = [o for o in body.ops if o.name != "yield"]
    if len(ops) != 1 or ops[0].dialect != "cinm":
        return None
    op = ops[0]
    term = body.terminator
    if list(term.operands) != list(op.results):
        return None
    if any(v.owner is not body for v in op.operands):
        return None
    return op


def _gemm_tiles(r, k, n, slice_bytes, t0):
    while True:
        tm, tn, tk = min(t0, r), min(t0, _even(n)), min(t0, _even(k))
        if WORD * (tm * tk + tk * tn + tm * tn) <= slice_bytes or t0 <= 2:
            return tm, tn, tk
        t0 //= 2


def _gemv_tiles(r, k, slice_bytes, t0):
    while True:
        tm, tk = min(t0, _even(r)), min(t0, _even(k))
        if WORD * (tm * tk + tk + tm) <= slice_bytes or t0 <= 2:
            return tm, tk
        t0 //= 2


def plan_launch(launch: Operation, slice_bytes: int, tile: int) -> Plan:
    wg, ins, outs = launch_parts(launch)
    nd = len(wg.type.dims)
    body = launch.regions[0]
    views = [v.type.shape for v in ins + outs]
    op = _single_op(body, nd)
    args = body.args[nd:]
    direct = op is not None and list(op.operands) == list(args[: len(ins)]) and len(outs) == len(op.results)
    if direct and op.mnemonic == "gemm" and len(ins) == 2:
        (r, k), (_, n) = views[0], views[1]
        tm, tn, tk = _gemm_tiles(r, k, n, slice_bytes, tile)
        rp, kp, np_ = _ceil_to(r, tm), _ceil_to(k, tk), _ceil_to(n, tn)
        return Plan("gemm", [(rp, kp), (kp, np_), (rp, np_)], {"tiles": [tm, tn, tk], "order": "jk"})
    if direct and op.mnemonic == "gemv" and len(ins) == 2:
        r, k = views[0]
        tm, tk = _gemv_tiles(r, k, slice_bytes, tile)
        rp, kp = _ceil_to(r, tm), _ceil_to(k, tk)
        return Plan("gemv", [(rp, kp), (kp,), (rp,)], {"tiles": [tm, tk], "order": "reload"})
    if direct and op.mnemonic in STREAMABLE and all(len(v) == 1 and v == views[0] for v in views) and views[0][0]:
        c = views[0][0]
        # largest even chunk that divides the (even) view and fits the slice
        ce, fit = _even(c), slice_bytes // (WORD * len(views))
        ch = max([d for d in range(2, min(ce, fit) + 1, 2) if ce % d == 0], default=2)
        return Plan("stream", [(_ceil_to(c, ch),)] * len(views), {"chunk": ch})
    return Plan("whole", [_default_pshape(v) for v in views], {})


# ---------------------------------------------------------------- kernel bodies


class _Dma:
    def __init__(self, b: Builder):
        self.b = b

    def transfer(self, name, h, w, ivs, coeffs, rows, cols, stride_words, offset=0):
        b = self.b
        off = affine(b, ivs, [c * WORD for c in coeffs], offset * WORD) if ivs else const(b, offset * WORD)
        b.create(name, [h, w, off], [], {"rows": rows, "row_bytes": cols * WORD, "stride": stride_words * WORD})

    def read(self, h, w, ivs, coeffs, shape, stride_words):
        rows, cols = (1, shape[0]) if len(shape) == 1 else shape
        self.transfer("upmem.mram_read", h, w, ivs, coeffs, rows, cols, stride_words)
        return self.b("load", [w], TensorType(shape, w.type.elem))


def _wram(b, shape, elem):
    return b("upmem.wram_alloc", [], MemRefType(shape, elem, "wram"))


def gemm_body(handles, tiles, order) -> Region:
    hA, hB, hC = handles
    tm, tn, tk = tiles
    rp, kp = hA.type.params
    np_ = hB.type.params[1]
    body = Region([h.type for h in handles])
    hA, hB, hC = body.args
    b = Builder(body)
    wa, wb = _wram(b, (tm, tk), "i32"), _wram(b, (tk, tn), "i32")
    wc = _wram(b, (tm, tn) if order == "jk" else (tm, np_), "i32")

    def a_tile(ib, i, kk):
        return _Dma(ib).read(hA, wa, [i, kk], [kp, 1], (tm, tk), kp)

    def b_tile(ib, kk, j):
        return _Dma(ib).read(hB, wb, [kk, j], [np_, 1], (tk, tn), np_)

    def rows_jk(ib, i, _):
        def cols(jb, j, __):
            def red(kb, kk, acc):
                g = C.build(kb, "gemm", [a_tile(kb, i, kk), b_tile(kb, kk, j)])
                return [C.build(kb, "add", [acc[0], g])]

            acc = build_for(jb, 0, kp, tk, [fill(jb, TensorType((tm, tn)))], red).result
            jb.create("store", [acc, wc])
            _Dma(jb).transfer("upmem.mram_write", hC, wc, [i, j], [np_, 1], tm, tn, np_)
            return []

        build_for(ib, 0, np_, tn, [], cols)
        return []

    def rows_kj(ib, i, _):
        def red(kb, kk, strip):
            a = a_tile(kb, i, kk)

            def cols(jb, j, s):
                zero = const(jb, 0)
                cur = extract(jb, s[0], [zero, j], [tm, tn])
                acc = C.build(jb, "add", [cur, C.build(jb, "gemm", [a, b_tile(jb, kk, j)])])
                return [insert(jb, acc, s[0], [zero, j])]

            return [build_for(kb, 0, np_, tn, strip, cols).result]

        strip = build_for(ib, 0, kp, tk, [fill(ib, TensorType((tm, np_)))], red).result
        ib.create("store", [strip, wc])
        _Dma(ib).transfer("upmem.mram_write", hC, wc, [i], [np_], tm, np_, np_)
        return []

    build_for(b, 0, rp, tm, [], rows_jk if order == "jk" else rows_kj)
    b.create("upmem.barrier_wait")
    b.create("yield")
    return body


def gemv_body(handles, tiles, order) -> Region:
    tm, tk = tiles
    rp, kp = handles[0].type.params
    body = Region([h.type for h in handles])
    hA, hx, hy = body.args
    b = Builder(body)
    wa, wy = _wram(b, (tm, tk), "i32"), _wram(b, (tm,), "i32")
    whole = None
    if order == "reuse":
        whole = _Dma(b).read(hx, _wram(b, (kp,), "i32"), [], [], (kp,), kp)
    else:
        wx = _wram(b, (tk,), "i32")

    def rows(ib, i, _):
        def red(kb, kk, acc):
            a = _Dma(kb).read(hA, wa, [i, kk], [kp, 1], (tm, tk), kp)
            x = extract(kb, whole, [kk], [tk]) if whole is not None else _Dma(kb).read(hx, wx, [kk], [1], (tk,), tk)
            return [C.build(kb, "add", [acc[0], C.build(kb, "gemv", [a, x])])]

        acc = build_for(ib, 0, kp, tk, [fill(ib, TensorType((tm,)))], red).result
        ib.create("store", [acc, wy])
        _Dma(ib).transfer("upmem.mram_write", hy, wy, [i], [1], 1, tm, tm)
        return []

    build_for(b, 0, rp, tm, [], rows)
    b.create("upmem.barrier_wait")
    b.create("yield")
    return body


def stream_body(handles, n_in, op: Operation, chunk) -> Region:
    body = Region([h.type for h in handles])
    b = Builder(body)
    elem = op.results[0].type.elem
    ws = [_wram(b, (chunk,), v.type.elem) for v in op.operands] + [_wram(b, (chunk,), elem)]
    (size,) = handles[0].type.params

    def step(sb, off, _):
        d = _Dma(sb)
        vals = [d.read(h, w, [off], [1], (chunk,), chunk) for h, w in zip(body.args[:n_in], ws)]
        out = C.build(sb, op.mnemonic, vals, **op.attrs)
        sb.create("store", [out, ws[-1]])
        d.transfer("upmem.mram_write", body.args[n_in], ws[-1], [off], [1], 1, chunk, chunk)
        return []

    build_for(b, 0, size, chunk, [], step)
    b.create("upmem.barrier_wait")
    b.create("yield")
    return body


def whole_body(handles, launch: Operation) -> Region:
    _, ins, outs = launch_parts(launch)
    src = launch.regions[0]
    nd = len(src.args) - len(ins) - len(outs)
    body = Region([h.type for h in handles])
    b = Builder(body)
    mapping = {}
    used = {v for o in src.walk() for v in o.operands}
    for lvl, a in enumerate(src.args[:nd]):
        if a in used:
            mapping[a] = b("upmem.tasklet_id", [], INDEX, level=lvl)
    views = src.args[nd:]
    bufs = [_wram(b, h.type.params, v.type.elem) for h, v in zip(handles, views)]
    d = _Dma(b)
    for i, (h, w, v) in enumerate(zip(body.args, bufs, views)):
        if i < len(ins) or v in used:
            words = prod(h.type.params)
            d.transfer("upmem.mram_read", h, w, [], [], 1, words, words)
            val = b("load", [w], TensorType(stored_shape(v.type.shape), v.type.elem))
            mapping[v] = reshape(b, val, v.type.shape)
    for o in clone_ops([o for o in src.ops if o.name != "yield"], mapping):
        b.add(o)
    for h, w, r, v in zip(body.args[len(ins):], bufs[len(ins):], src.terminator.operands, views[len(ins):]):
        val = reshape(b, mapping.get(r, r), stored_shape(v.type.shape))
        b.create("store", [val, w])
        words = prod(h.type.params)
        d.transfer("upmem.mram_write", h, w, [], [], 1, words, words)
    b.create("upmem.barrier_wait")
    b.create("yield")
    return body


# ---------------------------------------------------------------- lowering


def build_program(kind, handles, attrs, launch=None) -> Region:
    body = _build_program(kind, handles, attrs, launch)
    to_tasklet_ops(body)
    return body


def _build_program(kind, handles, attrs, launch):
    if kind == "gemm":
        return gemm_body(handles, attrs["tiles"], attrs["order"])
    if kind == "gemv":
        return gemv_body(handles, attrs["tiles"], attrs["order"])
    _, ins, _ = launch_parts(launch)
    if kind == "stream":
        op = _single_op(launch.regions[0], 0)
        return stream_body(handles, len(ins), op, attrs["chunk"])
    return whole_body(handles, launch)


def _merge(a, b):
    return tuple(max(x, y) for x, y in zip(a, b)) if a is not None else tuple(b)


def _replace(op: Operation, new: Operation) -> None:
    region = op.parent
    region.ops[region.ops.index(op)] = new
    new.parent = region


def lower_function(f, spec: UpmemSpec, tile: int) -> None:
    ops = list(f.walk())
    if not any(op.dialect == "cnm" for op in ops):
        return
    plans, layout = {}, {}
    for op in ops:
        if op.name == "cnm.launch":
            wg = op.operands[0].type.dims
            if len(wg) > 3:
                raise VerifyError(f"cnm-to-upmem: workgroup has {len(wg)} levels; (rank, dpu, tasklet) allows 3")
            plans[op] = p = plan_launch(op, wram_slice(spec.wram_bytes, wg), tile)
            for buf, ps in zip(op.operands[1:], p.pshapes):
                layout[buf.owner] = _merge(layout.get(buf.owner), ps)
        elif op.name == "cnm.wait":
            op.parent.ops.remove(op)
    next_base, views = {}, {}
    for op in ops:
        if op.name == "cnm.allocate":
            dims = list(op.attrs["dims"])
            rewrite_op(op, lambda b: b("upmem.alloc_dpus", [], grid_type(dims), wg=dims, **spec.attrs()))
        elif op.name == "cnm.alloc_buffer":
            t, grid = op.result.type, op.operands[0]
            ps = layout.get(op) or _default_pshape(t.shape)
            inst = t.wg[-1] if t.level == len(t.wg) else 1
            base = next_base.get(grid, 0)
            next_base[grid] = end = base + inst * prod(ps)
            if end * WORD > spec.mram_bytes:
                raise CapacityError(f"MRAM overflow: requires {end * WORD} bytes, available {spec.mram_bytes} bytes")
            (h,) = rewrite_op(op, lambda b: b("upmem.mram_alloc", [grid], mram_type(ps), level=t.level,
                                              instances=inst, base=base))
            views[h] = list(t.shape)
        elif op.name == "cnm.scatter":
            host, h = op.operands
            _replace(op, Operation("upmem.copy_to_mram", [h.owner.operands[0], host, h], [],
                                   {"map": op.attrs["map"], "view": views[h]}))
        elif op.name == "cnm.gather":
            (h,) = op.operands
            rewrite_op(op, lambda b: b("upmem.copy_from_mram", [h.owner.operands[0], h], op.result.type,
                                       map=op.attrs["map"], view=views[h]))
        elif op.name == "cnm.launch":
            p = plans[op]
            wg = op.operands[0].type.params
            body = build_program(p.kind, op.operands[1:], p.attrs, op)
            attrs = {"kernel": p.kind, **p.attrs, "wram_slice": wram_slice(spec.wram_bytes, wg),
                     "iram": spec.iram_bytes}
            _replace(op, Operation("upmem.launch", list(op.operands), [], attrs, [body]))


def _spec_from(opts) -> UpmemSpec:
    d = UpmemSpec()
    names = {"ranks": "ranks", "dpus": "dpus_per_rank", "tasklets": "tasklets_per_dpu", "wram": "wram_bytes",
             "mram": "mram_bytes", "iram": "iram_bytes"}
    vals = {field: int(opts[k]) if opts.get(k) is not None else getattr(d, field) for k, field in names.items()}
    if min(vals.values()) <= 0:
        raise VerifyError("cnm-to-upmem: machine parameters must be positive")
    return UpmemSpec(**vals)


@register_pass("cnm-to-upmem")
def lower_cnm_to_upmem(m: IrModule, ranks=None, dpus=None, tasklets=None, wram=None, mram=None, iram=None,
                       wram_tile=str(DEFAULT_TILE)) -> IrModule:
    spec = _spec_from(dict(ranks=ranks, dpus=dpus, tasklets=tasklets, wram=wram, mram=mram, iram=iram))
    tile = int(wram_tile)
    if tile < 2 or tile & (tile - 1):
        raise VerifyError("cnm-to-upmem: wram_tile must be a power of two >= 2")
    for f in m.functions:
        lower_function(f, spec, tile)
    return m


# ---------------------------------------------------------------- WRAM locality


def reuse_order(launch: Operation):
    """The reuse-friendly loop order for a tiled kernel, or None when it would
    not save traffic or would not fit the WRAM slice."""
    kind, slice_bytes = launch.attrs.get("kernel"), launch.attrs["wram_slice"]
    hs = launch.operands[1:]
    if kind == "gemm" and launch.attrs["order"] == "jk":
        tm, tn, tk = launch.attrs["tiles"]
        np_ = hs[1].type.params[1]
        if np_ > tn and WORD * (tm * tk + tk * tn + tm * np_) <= slice_bytes:
            return "kj"
    if kind == "gemv" and launch.attrs["order"] == "reload":
        tm, tk = launch.attrs["tiles"]
        rp, kp = hs[0].type.params
        if rp > tm and WORD * (tm * tk + kp + tm) <= slice_bytes:
            return "reuse"
    return None


@register_pass("upmem-wram-opt")
def wram_locality_opt(m: IrModule) -> IrModule:
    for op in list(m.walk()):
        if op.name != "upmem.launch":
            continue
        order = reuse_order(op)
        if order is not None:
            op.attrs["order"] = order
            body = build_program(op.attrs["kernel"], op.operands[1:], op.attrs)
            body.parent_op = op
            op.regions[0] = body
    return m


# ---------------------------------------------------------------- cost model


def isolate(op: Operation) -> IrModule:
    """A module whose @main applies a copy of ``op`` (device assignment
    dropped) to fresh arguments."""
    body = Region([v.type for v in op.operands])
    (copy,) = clone_ops([op], dict(zip(op.operands, body.args)))
    copy.attrs.pop("target", None)
    body.append(copy)
    Builder(body).create("return", list(copy.results))
    return IrModule([Function("main", body, [r.type for r in copy.results])])


def upmem_pipeline(spec: dict) -> str:
    wg = "x".join(str(d) for d in spec.get("wg", DEFAULT_WG))
    opts = ",".join(f"{k}={spec[k]}" for k in ("ranks", "dpus", "tasklets", "wram", "mram", "iram", "wram_tile")
                    if k in spec)
    pipe = f"cinm-to-cnm{{wg={wg}}},cnm-to-upmem" + (f"{{{opts}}}" if opts else "")
    return pipe + (",upmem-wram-opt" if spec.get("opt", True) else "")


@register_cost_model("upmem", "cnm")
def estimate_upmem(op: Operation, spec: dict) -> CostEstimate:
    try:
        lowered, _ = run_pipeline(isolate(op), upmem_pipeline(spec))
    except PassFailure as e:
        if isinstance(e.cause, CapacityError):
            return unsupported("upmem")  # does not fit the machine as configured
        raise
    met = static_counters(lowered)
    moved = met.host_to_mram_bytes + met.mram_to_host_bytes + met.mram_wram_bytes
    return CostEstimate("upmem", moved, 0, met.launches)
