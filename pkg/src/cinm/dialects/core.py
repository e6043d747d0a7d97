"""Core operations: structured loops, slicing, reshaping and host helpers.

These ops print without a dialect prefix (``for``, ``extract_slice`` ...).
"""

from __future__ import annotations

import numpy as np

from ..interp import ExecutionError, handler, wrap32
from ..ir import INDEX, I1, Builder, MemRefType, Operation, Region, TensorType, Token, register_op
from ..ir.types import IndexType, is_tensor_like
from ..ir.verifier import expect

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


def _tensor(op: Operation, i: int) -> TensorType:
    t = op.operands[i].type
    expect(isinstance(t, TensorType), op, f"operand #{i} must be a tensor, got {t}")
    return t


def _indices(op: Operation, start: int) -> None:
    for v in op.operands[start:]:
        expect(isinstance(v.type, IndexType), op, "offsets must be index values")


# ---------------------------------------------------------------- verifiers


def _v_constant(op):
    expect(isinstance(op.attrs.get("value"), int), op, "needs integer 'value'")
    expect(len(op.results) == 1 and op.result.type == INDEX, op, "result must be index")


def _v_fill(op):
    expect(isinstance(op.attrs.get("value"), int), op, "needs integer 'value'")
    expect(is_tensor_like(op.result.type), op, "result must be a tensor")


def _v_dense(op):
    vals = op.attrs.get("values")
    expect(isinstance(vals, list), op, "needs 'values' list")
    expect(len(vals) == op.result.type.element_count, op, "value count does not match result type")


def _v_affine(op):
    coeffs = op.attrs.get("coeffs", [])
    expect(len(coeffs) == len(op.operands), op, "one coefficient per operand required")
    _indices(op, 0)
    expect(op.result.type == INDEX, op, "result must be index")


def _v_for(op):
    for k in ("lower", "upper", "step"):
        expect(isinstance(op.attrs.get(k), int), op, f"needs integer '{k}'")
    expect(op.attrs["step"] > 0, op, "step must be positive")
    expect(len(op.regions) == 1, op, "needs one body region")
    body = op.regions[0]
    init_types = [v.type for v in op.operands]
    expect([a.type for a in body.args] == [INDEX] + init_types, op, "region arguments must be (index, iter_args...)")
    expect([r.type for r in op.results] == init_types, op, "result types must match iter_args")
    term = body.terminator
    expect(term is not None and term.name == "yield", op, "body must end with yield")
    expect([v.type for v in term.operands] == init_types, op, "yielded types must match iter_args")


def _v_extract(op):
    t = _tensor(op, 0)
    sizes = op.attrs.get("sizes")
    expect(isinstance(sizes, list) and len(sizes) == t.rank, op, "needs 'sizes' of source rank")
    expect(len(op.operands) == 1 + t.rank, op, "needs one offset per dimension")
    _indices(op, 1)
    expect(all(s <= d for s, d in zip(sizes, t.shape)), op, "slice larger than source")
    expect(op.result.type == TensorType(sizes, t.elem), op, "result type must match sizes")


def _v_insert(op):
    src, dst = _tensor(op, 0), _tensor(op, 1)
    expect(src.rank == dst.rank and src.elem == dst.elem, op, "source/destination rank or element mismatch")
    expect(len(op.operands) == 2 + dst.rank, op, "needs one offset per dimension")
    _indices(op, 2)
    expect(op.result.type == dst, op, "result type must equal destination type")


def _v_pad(op):
    t = _tensor(op, 0)
    high = op.attrs.get("high")
    expect(isinstance(high, list) and len(high) == t.rank and min(high, default=0) >= 0, op, "bad 'high'")
    expect(op.result.type == TensorType([d + h for d, h in zip(t.shape, high)], t.elem), op, "result shape mismatch")


def _v_reshape(op):
    t = _tensor(op, 0)
    r = op.result.type
    expect(isinstance(r, TensorType) and r.element_count == t.element_count and r.elem == t.elem, op,
           f"cannot reshape {t} to {r}")


def _v_permute(op):
    t = _tensor(op, 0)
    perm = op.attrs.get("perm")
    expect(isinstance(perm, list) and sorted(perm) == list(range(t.rank)), op, "invalid permutation")
    expect(op.result.type == TensorType([t.shape[p] for p in perm], t.elem), op, "result shape mismatch")


def _v_cast(op):
    t = _tensor(op, 0)
    r = op.result.type
    expect(isinstance(r, TensorType) and r.shape == t.shape, op, "cast keeps the shape")


def _v_threshold(op):
    t = _tensor(op, 0)
    expect(op.result.type == TensorType(t.shape, I1), op, "result must be an i1 tensor of the same shape")


def _v_compact(op):
    v, f, p = (_tensor(op, i) for i in range(3))
    expect(v.rank == 1 and v.shape == f.shape == p.shape, op, "operands must be rank-1 with equal length")
    expect(op.result.type == v, op, "result type must equal values type")


def _v_scan_carry(op):
    t = _tensor(op, 0)
    expect(t.rank == 2 and op.result.type == t, op, "operand and result must be the same rank-2 type")
    expect(op.attrs.get("op") in ("sum", "prod", "min", "max"), op, "op must be sum|prod|min|max")


def _v_select_merge(op):
    v, i = _tensor(op, 0), _tensor(op, 1)
    expect(v.rank == 2 and v.shape == i.shape, op, "candidates must be rank-2 and equal-shaped")
    k = op.attrs.get("k")
    expect(isinstance(k, int) and k >= 0, op, "needs 'k'")
    expect(op.attrs.get("order") in ("desc", "asc"), op, "order must be desc|asc")
    expect([r.type.shape for r in op.results] == [(k,), (k,)], op, "results must be two length-k tensors")


def _v_rank(op):
    v = _tensor(op, 0)
    k = op.attrs.get("k")
    expect(v.rank == 1 and isinstance(k, int) and 0 <= k <= v.shape[0], op, "rank needs rank-1 input and k <= n")
    expect(op.attrs.get("order") in ("desc", "asc"), op, "order must be desc|asc")


def _v_alloc(op):
    expect(isinstance(op.result.type, MemRefType), op, "result must be a memref")


def _v_load(op):
    m = op.operands[0].type
    expect(isinstance(m, MemRefType), op, "operand must be a memref")
    r = op.result.type
    expect(isinstance(r, TensorType) and len(r.shape) == len(m.shape) and all(a <= b for a, b in zip(r.shape, m.shape)),
           op, "loaded block must fit the memref")


def _v_store(op):
    t, m = op.operands[0].type, op.operands[1].type
    expect(isinstance(t, TensorType) and isinstance(m, MemRefType), op, "store tensor into memref")
    expect(len(t.shape) == len(m.shape) and all(a <= b for a, b in zip(t.shape, m.shape)), op, "block must fit")


def _v_fold(op):
    t = _tensor(op, 0)
    expect(t.rank >= 1 and op.result.type == TensorType(t.shape[1:], t.elem), op,
           "folds the leading axis: result drops the first dimension")
    expect(op.attrs.get("op") in ("sum", "prod", "min", "max"), op, "op must be sum|prod|min|max")


def _v_arith(op):
    a, b = _tensor(op, 0), _tensor(op, 1)
    expect(a == b == op.result.type, op, "operands and result must share one type")
    expect(op.attrs.get("op") in ("add", "sub"), op, "op must be add|sub")


def _v_return(op):
    pass


register_op("constant", _v_constant)
register_op("fold", _v_fold)
register_op("arith", _v_arith)
register_op("fill", _v_fill)
register_op("dense", _v_dense)
register_op("affine_apply", _v_affine)
register_op("for", _v_for)
register_op("yield", terminator=True)
register_op("return", _v_return, terminator=True)
register_op("extract_slice", _v_extract)
register_op("insert_slice", _v_insert)
register_op("pad", _v_pad)
register_op("reshape", _v_reshape)
register_op("permute", _v_permute)
register_op("cast", _v_cast)
register_op("threshold", _v_threshold)
register_op("compact", _v_compact)
register_op("scan_carry", _v_scan_carry)
register_op("select_merge", _v_select_merge)
register_op("rank", _v_rank)
register_op("alloc", _v_alloc, pure=False)
register_op("load", _v_load)
register_op("store", _v_store, pure=False)


# ---------------------------------------------------------------- semantics


@handler("constant")
def _constant(interp, op, vals, env):
    return [op.attrs["value"]]


@handler("fill")
def _fill(interp, op, vals, env):
    t = op.result.type
    return [wrap32(np.full(t.shape, op.attrs["value"], dtype=np.int64))]


@handler("dense")
def _dense(interp, op, vals, env):
    return [wrap32(np.asarray(op.attrs["values"], dtype=np.int64).reshape(op.result.type.shape))]


@handler("affine_apply")
def _affine(interp, op, vals, env):
    return [sum(c * v for c, v in zip(op.attrs["coeffs"], vals)) + op.attrs.get("offset", 0)]


@handler("for")
def _for(interp, op, vals, env):
    lo, hi, st = op.attrs["lower"], op.attrs["upper"], op.attrs["step"]
    body = op.regions[0]
    carried = list(vals)
    for iv in range(lo, hi, st):
        carried = interp.run_region(body, [iv] + carried, env)
    return carried


def _slices(offsets, sizes, shape, op):
    for o, s, d in zip(offsets, sizes, shape):
        if o < 0 or o + s > d:
            raise ExecutionError(f"{op.name}: slice [{o}, {o + s}) out of bounds for extent {d}")
    return tuple(slice(o, o + s) for o, s in zip(offsets, sizes))


@handler("extract_slice")
def _extract(interp, op, vals, env):
    src = vals[0]
    sl = _slices(vals[1:], op.attrs["sizes"], src.shape, op)
    return [np.array(src[sl])]


@handler("insert_slice")
def _insert(interp, op, vals, env):
    src, dst = vals[0], vals[1]
    sl = _slices(vals[2:], src.shape, dst.shape, op)
    out = np.array(dst)
    out[sl] = src
    return [out]


@handler("pad")
def _pad(interp, op, vals, env):
    widths = [(0, h) for h in op.attrs["high"]]
    return [wrap32(np.pad(vals[0].astype(np.int64), widths, constant_values=op.attrs.get("value", 0)))]


@handler("reshape")
def _reshape(interp, op, vals, env):
    return [np.array(vals[0]).reshape(op.result.type.shape)]


@handler("permute")
def _permute(interp, op, vals, env):
    return [np.ascontiguousarray(np.transpose(vals[0], op.attrs["perm"]))]


@handler("cast")
def _cast(interp, op, vals, env):
    if op.result.type.elem == I1:
        return [(vals[0] != 0).astype(np.int32)]
    return [np.array(vals[0], dtype=np.int32)]


@handler("threshold")
def _threshold(interp, op, vals, env):
    return [(vals[0].astype(np.int64) > op.attrs["value"]).astype(np.int32)]


@handler("compact")
def _compact(interp, op, vals, env):
    v, f, p = vals
    out = np.zeros_like(v)
    for i in range(v.shape[0]):
        if f[i]:
            out[int(p[i]) - 1] = v[i]
    return [out]


COMBINE = {
    "sum": lambda a, b: a + b,
    "prod": lambda a, b: a * b,
    "min": np.minimum,
    "max": np.maximum,
}

IDENTITY = {"sum": 0, "prod": 1, "min": INT32_MAX, "max": INT32_MIN}


@handler("fold")
def _fold(interp, op, vals, env):
    kind = str(op.attrs["op"])
    x = vals[0].astype(np.int64)
    acc = np.full(x.shape[1:], IDENTITY[kind], dtype=np.int64)
    for row in x:
        acc = wrap32(COMBINE[kind](acc, row)).astype(np.int64)
    return [wrap32(acc)]


@handler("arith")
def _arith(interp, op, vals, env):
    a, b = (v.astype(np.int64) for v in vals)
    return [wrap32(a + b if op.attrs["op"] == "add" else a - b)]


@handler("scan_carry")
def _scan_carry(interp, op, vals, env):
    t = vals[0].astype(np.int64)
    fn = COMBINE[str(op.attrs["op"])]
    out = np.array(t)
    carry = None
    for row in range(t.shape[0]):
        if carry is not None:
            out[row] = wrap32(fn(carry, t[row]))
        if t.shape[1]:
            carry = int(wrap32(out[row, -1]))
    return [wrap32(out)]


def select_order(values, order: str) -> list[int]:
    """Stable ranking of positions: best first, ties by lower position."""
    keyed = values.astype(np.int64)
    if order == "desc":
        return sorted(range(len(keyed)), key=lambda i: (-int(keyed[i]), i))
    return sorted(range(len(keyed)), key=lambda i: (int(keyed[i]), i))


@handler("select_merge")
def _select_merge(interp, op, vals, env):
    v, idx = vals
    k, chunk, limit = op.attrs["k"], op.attrs["chunk"], op.attrs["limit"]
    leaves, lk = v.shape
    cand_v, cand_i = [], []
    for leaf in range(leaves):
        for j in range(lk):
            g = leaf * chunk + int(idx[leaf, j])
            if g < limit:
                cand_v.append(int(v[leaf, j]))
                cand_i.append(g)
    cand_v = np.asarray(cand_v, dtype=np.int64)
    sign = -1 if op.attrs["order"] == "desc" else 1
    order = sorted(range(len(cand_v)), key=lambda i: (sign * int(cand_v[i]), cand_i[i]))[:k]
    if len(order) < k:
        raise ExecutionError("select_merge: fewer candidates than k")
    return [wrap32(cand_v[order]), np.asarray([cand_i[i] for i in order], dtype=np.int32)]


@handler("rank")
def _rank(interp, op, vals, env):
    order = select_order(vals[0], op.attrs["order"])[: op.attrs["k"]]
    return [np.array(vals[0][order]), np.asarray(order, dtype=np.int32)]


@handler("alloc")
def _alloc(interp, op, vals, env):
    return [np.zeros(op.result.type.shape, dtype=np.int32)]


@handler("load")
def _load(interp, op, vals, env):
    shape = op.result.type.shape
    return [np.array(vals[0][tuple(slice(0, s) for s in shape)])]


@handler("store")
def _store(interp, op, vals, env):
    t, m = vals
    m[tuple(slice(0, s) for s in t.shape)] = t
    return []


# ---------------------------------------------------------------- builders


def const(b: Builder, value: int):
    return b("constant", [], INDEX, value=int(value))


def build_for(b: Builder, lower: int, upper: int, step: int, inits, body_fn, attrs=None):
    """Build ``for`` with iter_args; ``body_fn(builder, iv, carried) -> yielded``."""
    region = Region([INDEX] + [v.type for v in inits])
    inner = Builder(region)
    yielded = body_fn(inner, region.args[0], region.args[1:])
    inner.create("yield", list(yielded))
    a = {"lower": int(lower), "upper": int(upper), "step": int(step)}
    a.update(attrs or {})
    return b.create("for", list(inits), [v.type for v in inits], a, [region])


def build_nest(b: Builder, uppers, inits, body_fn, steps=None, attrs=None) -> list:
    """Perfect nest of ``for`` loops from 0 to each upper bound.

    Levels with a single iteration get a constant 0 induction value instead of
    a loop. ``body_fn(builder, ivs, carried) -> yielded``; returns the final
    carried values.
    """
    steps = steps or [1] * len(uppers)
    zero = const(b, 0) if any(u <= s for u, s in zip(uppers, steps)) else None

    def level(bb, d, ivs, carried):
        if d == len(uppers):
            return list(body_fn(bb, ivs, carried))
        if uppers[d] <= steps[d]:
            return level(bb, d + 1, ivs + [zero], carried)
        op = build_for(bb, 0, uppers[d], steps[d], carried,
                       lambda ib, iv, c: level(ib, d + 1, ivs + [iv], list(c)), attrs)
        return op.results

    return list(level(b, 0, [], list(inits)))


def affine(b: Builder, ivs, coeffs, offset: int = 0):
    return b("affine_apply", list(ivs), INDEX, coeffs=list(coeffs), offset=int(offset))


def extract(b: Builder, src, offsets, sizes):
    t = src.type
    return b("extract_slice", [src, *offsets], TensorType(sizes, t.elem), sizes=list(sizes))


def insert(b: Builder, src, dst, offsets):
    return b("insert_slice", [src, dst, *offsets], dst.type)


def reshape(b: Builder, v, shape):
    if tuple(shape) == v.type.shape:
        return v
    return b("reshape", [v], TensorType(shape, v.type.elem))


def pad_to(b: Builder, v, shape, value: int = 0):
    high = [s - d for s, d in zip(shape, v.type.shape)]
    if not any(high):
        return v
    return b("pad", [v], TensorType(shape, v.type.elem), high=high, value=int(value))


def crop(b: Builder, v, shape):
    if tuple(shape) == v.type.shape:
        return v
    zeros = [const(b, 0) for _ in shape]
    return extract(b, v, zeros, shape)


def fill(b: Builder, t: TensorType, value: int = 0):
    return b("fill", [], t, value=int(value))


def tok(s: str) -> Token:
    return Token(s)

