"""cinm -> cnm: distribute each cinm op over a workgroup.

Every op becomes scatter / launch / wait / gather around a per-leaf copy of
the same cinm op, with any cross-leaf combination done by host ops.
"""

from __future__ import annotations

from math import ceil, prod

import numpy as np

from ..dialects import cinm as C
from ..dialects.cnm import TOKEN, AffineMap, elem_dims, leaf_dims, leaf_linear
from ..dialects.core import IDENTITY, INT32_MIN, crop, pad_to, reshape
from ..ir import (
    I1,
    I32,
    INDEX,
    BufferType,
    Builder,
    IrModule,
    Operation,
    Region,
    TensorType,
    Token,
    VerifyError,
    WorkgroupType,
    register_pass,
    rewrite_op,
)
from ..ir.passes import parse_dims
from ..rewrites import rewrite_contraction_to_gemm, rewrite_conv2d_to_gemm
from ..targetsel import target_paradigm

DEFAULT_WG = (4, 16)


class Grid:
    """The workgroup of one function plus helpers to build kernels on it."""

    def __init__(self, wg, dims):
        self.wg = wg
        self.dims = tuple(dims)
        self.leaves = prod(dims)
        self.lid = leaf_linear(dims)

    def buffer(self, b, shape, elem, level=None):
        level = len(self.dims) if level is None else level
        t = BufferType(shape, elem, self.dims, level)
        return b("cnm.alloc_buffer", [self.wg], t, level=level)

    def scatter(self, b, host, buf, exprs):
        amap = _map(buf.type, exprs)
        b.create("cnm.scatter", [host, buf], [], {"map": amap})

    def gather(self, b, buf, host_type, exprs):
        return b("cnm.gather", [buf], host_type, map=_map(buf.type, exprs))

    def kernel(self, b, ins, outs, body_fn):
        """Run ``body_fn(builder, *in_views) -> out values`` on every leaf.

        ``ins``: (host value, view shape, level, host index exprs) tuples.
        ``outs``: (view shape, elem, host type, host index exprs) tuples.
        Returns the gathered host values.
        """
        in_bufs = []
        for host, shape, level, exprs in ins:
            buf = self.buffer(b, shape, host.type.elem, level)
            self.scatter(b, host, buf, exprs)
            in_bufs.append(buf)
        out_bufs = [self.buffer(b, shape, elem) for shape, elem, _, _ in outs]
        body = Region([INDEX] * len(self.dims) + [v.type.view_type for v in in_bufs + out_bufs])
        bb = Builder(body)
        views = body.args[len(self.dims):]
        res = body_fn(bb, *views[: len(in_bufs)])
        res = list(res) if isinstance(res, (list, tuple)) else [res]
        bb.create("yield", res)
        launch = b.create("cnm.launch", [self.wg, *in_bufs, *out_bufs], [TOKEN], {"num_ins": len(in_bufs)}, [body])
        b.create("cnm.wait", [self.wg, launch.results[0]], [])
        return [self.gather(b, buf, host_t, exprs) for buf, (_, _, host_t, exprs) in zip(out_bufs, outs)]

    def strip(self, rows: int) -> str:
        return f"({self.lid}) * {rows} + e0"


def _map(bt: BufferType, exprs) -> str:
    return str(AffineMap.of(leaf_dims(bt.level) + elem_dims(len(bt.shape)), exprs))


# ---------------------------------------------------------------- per-op lowering


def _flat_chunks(g: Grid, b, v, pad_value=0):
    """Flatten ``v`` and pad it to leaves * chunk; returns (padded, chunk, n)."""
    n = v.type.element_count
    c = ceil(n / g.leaves)
    flat = reshape(b, v, [n])
    return pad_to(b, flat, [g.leaves * c], pad_value), c, n


def _elementwise(g, b, op):
    shape, elem = op.results[0].type.shape, op.results[0].type.elem
    padded = [_flat_chunks(g, b, v) for v in op.operands]
    c, n = padded[0][1], padded[0][2]
    ins = [(p, [c], None, [g.strip(c)]) for p, _, _ in padded]
    (out,) = g.kernel(b, ins, [([c], elem, TensorType([g.leaves * c], elem), [g.strip(c)])],
                      lambda bb, *views: C.build(bb, op.mnemonic, list(views), **op.attrs))
    return reshape(b, crop(b, out, [n]), shape)


def _row_strips(g, b, a):
    m = a.type.shape[0]
    r = ceil(m / g.leaves)
    return pad_to(b, a, [g.leaves * r, *a.type.shape[1:]]), r


def _gemm_like(g, b, op):
    a, other = op.operands
    m = a.type.shape[0]
    ap, r = _row_strips(g, b, a)
    k = a.type.shape[1]
    broadcast = [f"e{i}" for i in range(other.type.rank)]
    out_t = op.results[0].type
    tail = list(out_t.shape[1:])
    exprs = [g.strip(r)] + [f"e{i + 1}" for i in range(len(tail))]
    (out,) = g.kernel(
        b,
        [(ap, [r, k], None, [g.strip(r), "e1"]), (other, list(other.type.shape), 0, broadcast)],
        [([r, *tail], out_t.elem, TensorType([g.leaves * r, *tail], out_t.elem), exprs)],
        lambda bb, av, ov: C.build(bb, op.mnemonic, [av, ov]),
    )
    return crop(b, out, [m, *tail])


def _reduce_value(g, b, x, mnemonic, attrs):
    """Per-leaf partial reduction of ``x`` followed by a host fold."""
    kind = mnemonic if mnemonic in ("min", "max") else str(attrs["op"])
    xp, c, _ = _flat_chunks(g, b, x, IDENTITY[kind])
    elem = x.type.elem
    (parts,) = g.kernel(
        b,
        [(xp, [c], None, [g.strip(c)])],
        [([], elem, TensorType([g.leaves], elem), [g.lid])],
        lambda bb, v: C.build(bb, mnemonic, [v], **attrs),
    )
    return b("fold", [parts], TensorType((), elem), op=Token(kind))


def _reduction(g, b, op):
    return _reduce_value(g, b, op.operands[0], op.mnemonic, op.attrs)


def _scan(g, b, op):
    kind = str(op.attrs["op"])
    (x,) = op.operands
    xp, c, n = _flat_chunks(g, b, x, IDENTITY[kind])
    (parts,) = g.kernel(
        b,
        [(xp, [c], None, [g.strip(c)])],
        [([c], x.type.elem, TensorType([g.leaves, c]), [g.lid, "e0"])],
        lambda bb, v: C.build(bb, "scan", [v], op=kind),
    )
    carried = b("scan_carry", [parts], parts.type, op=Token(kind))
    return crop(b, reshape(b, carried, [g.leaves * c]), [n])


def _select(g, b, op, xp, chunk, limit, local_k, extra_in, order):
    """Per-leaf selection followed by a host merge of all leaf candidates."""
    k = op.results[0].type.shape[0]
    cand = TensorType([g.leaves, local_k])
    attrs = dict(op.attrs)
    attrs["k" if op.mnemonic == "topk" else "count"] = local_k
    rows = [g.strip(chunk)] + ([] if xp.type.rank == 1 else ["e1"])
    ins = [(xp, [chunk, *xp.type.shape[1:]], None, rows)]
    if extra_in is not None:
        ins = [(extra_in, list(extra_in.type.shape), 0, ["e0"])] + ins

    def body(bb, *views):
        return C.build(bb, op.mnemonic, list(views), **attrs)

    vals, idx = g.kernel(
        b, ins,
        [([local_k], I32, cand, [g.lid, "e0"]), ([local_k], I32, cand, [g.lid, "e0"])],
        body,
    )
    res = b.create("select_merge", [vals, idx], [TensorType([k]), TensorType([k])],
                   {"k": k, "chunk": chunk, "limit": limit, "order": Token(order)})
    return res.results


def _topk(g, b, op):
    (x,) = op.operands
    n = x.type.shape[0]
    xp, c, _ = _flat_chunks(g, b, x, INT32_MIN)
    pad = g.leaves * c - n
    return _select(g, b, op, xp, c, n, min(op.attrs["k"] + pad, c), None, "desc")


def _simsearch(g, b, op):
    q, corpus = op.operands
    n = corpus.type.shape[0]
    cp, r = _row_strips(g, b, corpus)
    pad = g.leaves * r - n
    order = "desc" if op.attrs["metric"] == "dot" else "asc"
    return _select(g, b, op, cp, r, n, min(op.attrs["count"] + pad, r), q, order)


def _histogram(g, b, op):
    bins = op.attrs["bins"]
    (x,) = op.operands
    xp, c, n = _flat_chunks(g, b, x, 0)
    (parts,) = g.kernel(
        b,
        [(xp, [c], None, [g.strip(c)])],
        [([bins], I32, TensorType([g.leaves, bins]), [g.lid, "e0"])],
        lambda bb, v: C.build(bb, "histogram", [v], bins=bins),
    )
    hist = b("fold", [parts], TensorType([bins]), op=Token("sum"))
    pad = g.leaves * c - n
    if pad:
        # Padding zeros all landed in bin 0.
        corr = b("dense", [], hist.type, values=[pad] + [0] * (bins - 1))
        hist = b("arith", [hist, corr], hist.type, op=Token("sub"))
    return hist


def _majority(g, b, op):
    (x,) = op.operands
    n = x.type.shape[0]
    ones = b("cast", [x], TensorType(x.type.shape))
    total = _reduce_value(g, b, ones, "reduce", {"op": "sum"})
    return b("threshold", [total], TensorType((), I1), value=n // 2)


def _transpose(g, b, op):
    (a,) = op.operands
    m, n = a.type.shape
    ap, r = _row_strips(g, b, a)
    (out,) = g.kernel(
        b,
        [(ap, [r, n], None, [g.strip(r), "e1"])],
        [([n, r], a.type.elem, TensorType([n, g.leaves * r], a.type.elem), ["e0", f"({g.lid}) * {r} + e1"])],
        lambda bb, v: C.build(bb, "transpose", [v]),
    )
    return crop(b, out, [n, m])


def _merge(g, b, op):
    if op.attrs["kind"] == "sum":
        return _elementwise(g, b, op)
    acc, part = op.operands
    axis = op.attrs.get("axis", 0)
    out_t = op.results[0].type
    zero = b("constant", [], INDEX, value=0)
    off = b("constant", [], INDEX, value=acc.type.shape[axis])
    res = b("fill", [], out_t, value=0)
    res = b("insert_slice", [acc, res] + [zero] * out_t.rank, out_t)
    offs = [off if i == axis else zero for i in range(out_t.rank)]
    return b("insert_slice", [part, res, *offs], out_t)


LOWER = {
    "add": _elementwise,
    "sub": _elementwise,
    "logicop": _elementwise,
    "gemm": _gemm_like,
    "gemv": _gemm_like,
    "min": _reduction,
    "max": _reduction,
    "reduce": _reduction,
    "scan": _scan,
    "topk": _topk,
    "simSearch": _simsearch,
    "histogram": _histogram,
    "majority": _majority,
    "transpose": _transpose,
    "mergePartial": _merge,
}


def _constant_fold(b, op):
    """Ops touching zero-size tensors are evaluated at compile time."""
    vals = [np.zeros(v.type.shape, dtype=np.int32) for v in op.operands]
    outs = C.evaluate(op.mnemonic, op.attrs, vals)
    return [b("dense", [], r.type, values=[int(x) for x in np.ravel(o)]) for r, o in zip(op.results, outs)]


def is_zero_size(op: Operation) -> bool:
    return any(v.type.element_count == 0 for v in list(op.operands) + list(op.results))


def _in_launch(op: Operation) -> bool:
    region = op.parent
    while region is not None and region.parent_op is not None:
        if region.parent_op.name in ("cnm.launch", "upmem.launch", "cim.execute"):
            return True
        region = region.parent_op.parent
    return False


def lower_function(f, dims) -> None:
    ops = [op for op in f.walk() if op.dialect == "cinm" and not _in_launch(op)
           and target_paradigm(op) in (None, "cnm")]
    for op in ops:
        if op.mnemonic in C.STAGING:
            raise VerifyError(f"{op.name}: staging op must be rewritten to gemm before lowering")
        kind = C.kind_of(op)
        if kind is None or not C.supported(kind, "cnm"):
            raise VerifyError(f"{op.name}: not CNM-supported (support matrix has no cnm mark)")
    if not ops:
        return
    b = Builder(f.body, 0)
    wg = b("cnm.allocate", [], WorkgroupType(dims), dims=list(dims))
    g = Grid(wg, dims)
    for op in ops:
        if is_zero_size(op):
            rewrite_op(op, lambda bb: _constant_fold(bb, op))
        else:
            rewrite_op(op, lambda bb: LOWER[op.mnemonic](g, bb, op))


@register_pass("cinm-to-cnm")
def lower_cinm_to_cnm(m: IrModule, wg="4x16") -> IrModule:
    dims = parse_dims(wg, DEFAULT_WG)
    if not dims or min(dims) <= 0:
        raise VerifyError("cinm-to-cnm: workgroup extents must be positive")
    m = rewrite_contraction_to_gemm(rewrite_conv2d_to_gemm(m))
    for f in m.functions:
        lower_function(f, dims)
    return m
