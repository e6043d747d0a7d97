"""The device-agnostic ``cinm`` dialect.

Every op has a type-inference rule (used by the verifier and by builders)
and an evaluator on int32 arrays. Ops with tensor semantics return their
results; the bufferized form of the same op has no results and writes into
trailing memref operands instead.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from ..interp import TensorValue, handler, run_function, wrap32
from ..ir import I1, I32, Function, MemRefType, Operation, TensorType, Token, VerifyError, register_op
from .core import COMBINE, IDENTITY, select_order


class CinmOpKind(str, Enum):
    add = "add"
    sub = "sub"
    gemm = "gemm"
    gemv = "gemv"
    min = "min"
    max = "max"
    logicop = "logicop"
    transpose = "transpose"
    histogram = "histogram"
    majority = "majority"
    topk = "topk"
    simSearch = "simSearch"
    mergePartial = "mergePartial"
    popcount = "popcount"
    reduce = "reduce"
    scan = "scan"


@dataclass(frozen=True)
class Support:
    cim: bool
    cnm: bool


_BOTH, _CNM, _CIM = Support(True, True), Support(False, True), Support(True, False)

SUPPORT: dict[CinmOpKind, Support] = {
    CinmOpKind.add: _BOTH,
    CinmOpKind.sub: _BOTH,
    CinmOpKind.gemm: _BOTH,
    CinmOpKind.gemv: _BOTH,
    CinmOpKind.min: _BOTH,
    CinmOpKind.max: _BOTH,
    CinmOpKind.logicop: _BOTH,
    CinmOpKind.simSearch: _BOTH,
    CinmOpKind.mergePartial: _BOTH,
    CinmOpKind.transpose: _CNM,
    CinmOpKind.histogram: _CNM,
    CinmOpKind.majority: _CNM,
    CinmOpKind.topk: _CNM,
    CinmOpKind.reduce: _CNM,
    CinmOpKind.scan: _CNM,
    CinmOpKind.popcount: _CIM,
}

REDUCE_KINDS = ("sum", "prod", "min", "max")
LOGIC_OPS = ("and", "or", "xor", "not", "nand", "nor")
METRICS = ("dot", "l2")
MERGE_KINDS = ("sum", "concat")

# Staging ops that only exist until the conv/contraction rewrites run.
STAGING = ("conv2d", "contract")


def kind_of(op: Operation) -> CinmOpKind | None:
    if op.dialect != "cinm":
        return None
    try:
        return CinmOpKind(op.mnemonic)
    except ValueError:
        return None


def supported(op_or_kind, paradigm: str) -> bool:
    kind = op_or_kind if isinstance(op_or_kind, CinmOpKind) else kind_of(op_or_kind)
    if kind is None:
        return False
    return getattr(SUPPORT[kind], paradigm)


# ---------------------------------------------------------------- inference


class ShapeError(VerifyError):
    pass


def _need(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"cinm.{name}: {msg}")


def _infer_binary(name, ins, attrs):
    a, b = ins
    _need(a.shape == b.shape, name, f"operand shapes differ ({a} vs {b})")
    _need(a.elem == b.elem == I32, name, "operands must be i32")
    return [a]


def _infer_gemm(name, ins, attrs):
    a, b = ins
    _need(a.rank == 2 and b.rank == 2, name, "operands must be rank 2")
    _need(a.shape[1] == b.shape[0], name, f"inner dimensions differ ({a} vs {b})")
    return [TensorType((a.shape[0], b.shape[1]), I32)]


def _infer_gemv(name, ins, attrs):
    a, x = ins
    _need(a.rank == 2 and x.rank == 1, name, "expects (m x k) matrix and (k) vector")
    _need(a.shape[1] == x.shape[0], name, f"inner dimensions differ ({a} vs {x})")
    return [TensorType((a.shape[0],), I32)]


def _infer_minmax(name, ins, attrs):
    (a,) = ins
    _need(a.element_count > 0, name, "needs a non-empty tensor")
    return [TensorType((), a.elem)]


def _infer_logic(name, ins, attrs):
    op = attrs.get("op")
    _need(op in LOGIC_OPS, name, f"op must be one of {', '.join(LOGIC_OPS)}")
    _need(len(ins) == (1 if op == "not" else 2), name, "wrong operand count for logic op")
    _need(all(t.elem == I1 for t in ins), name, "operands must be i1")
    _need(all(t.shape == ins[0].shape for t in ins), name, "operand shapes differ")
    return [ins[0]]


def _infer_transpose(name, ins, attrs):
    (a,) = ins
    _need(a.rank == 2, name, "operand must be rank 2")
    return [TensorType((a.shape[1], a.shape[0]), a.elem)]


def _infer_histogram(name, ins, attrs):
    (a,) = ins
    bins = attrs.get("bins")
    _need(isinstance(bins, int) and bins >= 1, name, "needs 'bins' >= 1")
    _need(a.elem == I32, name, "operand must be i32")
    return [TensorType((bins,), I32)]


def _infer_majority(name, ins, attrs):
    (a,) = ins
    _need(a.rank == 1 and a.elem == I1, name, "operand must be a rank-1 i1 tensor")
    return [TensorType((), I1)]


def _infer_topk(name, ins, attrs):
    (a,) = ins
    k = attrs.get("k")
    _need(a.rank == 1 and a.elem == I32, name, "operand must be a rank-1 i32 tensor")
    _need(isinstance(k, int) and 0 <= k <= a.shape[0], name, "needs 0 <= k <= n")
    return [TensorType((k,), I32), TensorType((k,), I32)]


def _infer_simsearch(name, ins, attrs):
    q, corpus = ins
    count = attrs.get("count")
    _need(attrs.get("metric") in METRICS, name, "metric must be dot|l2")
    _need(q.rank == 1 and corpus.rank == 2 and corpus.shape[1] == q.shape[0], name,
          "expects query (k) and corpus (n x k)")
    _need(isinstance(count, int) and 0 <= count <= corpus.shape[0], name, "needs 0 <= count <= n")
    return [TensorType((count,), I32), TensorType((count,), I32)]


def _infer_merge(name, ins, attrs):
    acc, part = ins
    kind, axis = attrs.get("kind"), attrs.get("axis", 0)
    _need(kind in MERGE_KINDS, name, "kind must be sum|concat")
    if kind == "sum":
        _need(acc.shape == part.shape, name, "sum-merge needs equal shapes")
        return [acc]
    _need(acc.rank == part.rank and 0 <= axis < acc.rank, name, "concat axis out of range")
    _need(all(a == p for i, (a, p) in enumerate(zip(acc.shape, part.shape)) if i != axis), name,
          "concat shapes differ off the axis")
    shape = list(acc.shape)
    shape[axis] += part.shape[axis]
    return [TensorType(shape, acc.elem)]


def _infer_popcount(name, ins, attrs):
    (a,) = ins
    _need(a.elem == I1, name, "operand must be an i1 bit tensor")
    return [TensorType((), I32)]


def _infer_reduce(name, ins, attrs):
    (a,) = ins
    _need(attrs.get("op") in REDUCE_KINDS, name, "op must be sum|prod|min|max")
    _need(a.elem == I32, name, "operand must be i32")
    return [TensorType((), I32)]


def _infer_scan(name, ins, attrs):
    (a,) = ins
    _need(attrs.get("op") in REDUCE_KINDS, name, "op must be sum|prod|min|max")
    _need(a.rank == 1 and a.elem == I32, name, "operand must be a rank-1 i32 tensor")
    return [a]


def _conv_geometry(ins, attrs):
    x, f = ins
    if x.rank != 4 or f.rank != 4:
        raise ShapeError("cinm.conv2d: expects NHWC input and HWCF filter")
    if x.shape[3] != f.shape[2]:
        raise ShapeError("cinm.conv2d: channel mismatch between input and filter")
    sh, sw = attrs.get("strides", [1, 1])
    ph, pw = attrs.get("padding", [0, 0])
    n, h, w, _ = x.shape
    kh, kw, _, fo = f.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("cinm.conv2d: filter larger than input")
    return (n, oh, ow, fo), (sh, sw), (ph, pw)


def _infer_conv(name, ins, attrs):
    out, _, _ = _conv_geometry(ins, attrs)
    return [TensorType(out, I32)]


def parse_contraction(spec: str) -> tuple[list[str], str]:
    m = re.fullmatch(r"\s*([a-z]+)\s*,\s*([a-z]+)\s*->\s*([a-z]*)\s*", spec or "")
    if not m:
        raise ShapeError(f"cinm.contract: malformed index string '{spec}'")
    return [m.group(1), m.group(2)], m.group(3)


def _infer_contract(name, ins, attrs):
    inputs, out = parse_contraction(attrs.get("spec"))
    _need(len(set(out)) == len(out), name, f"repeated output index in '{attrs.get('spec')}'")
    extents = {}
    for idx, t in zip(inputs, ins):
        _need(len(idx) == t.rank, name, f"index string '{idx}' does not match rank of {t}")
        for c, d in zip(idx, t.shape):
            _need(extents.setdefault(c, d) == d, name, f"index '{c}' has inconsistent extents")
    _need(all(c in extents for c in out), name, "output index not present in inputs")
    return [TensorType([extents[c] for c in out], I32)]


INFER: dict[str, tuple[int | tuple, Callable]] = {
    "add": (2, _infer_binary),
    "sub": (2, _infer_binary),
    "gemm": (2, _infer_gemm),
    "gemv": (2, _infer_gemv),
    "min": (1, _infer_minmax),
    "max": (1, _infer_minmax),
    "logicop": ((1, 2), _infer_logic),
    "transpose": (1, _infer_transpose),
    "histogram": (1, _infer_histogram),
    "majority": (1, _infer_majority),
    "topk": (1, _infer_topk),
    "simSearch": (2, _infer_simsearch),
    "mergePartial": (2, _infer_merge),
    "popcount": (1, _infer_popcount),
    "reduce": (1, _infer_reduce),
    "scan": (1, _infer_scan),
    "conv2d": (2, _infer_conv),
    "contract": (2, _infer_contract),
}


def infer(mnemonic: str, in_types, attrs) -> list[TensorType]:
    arity, fn = INFER[mnemonic]
    ok = len(in_types) in arity if isinstance(arity, tuple) else len(in_types) == arity
    if not ok:
        raise ShapeError(f"cinm.{mnemonic}: wrong number of operands ({len(in_types)})")
    for t in in_types:
        if not isinstance(t, TensorType):
            raise ShapeError(f"cinm.{mnemonic}: operands must be tensors, got {t}")
    return fn(mnemonic, list(in_types), attrs)


def num_results(mnemonic: str) -> int:
    return 2 if mnemonic in ("topk", "simSearch") else 1


def split_dps(op: Operation) -> tuple[list, list]:
    """(inputs, destinations). A bufferized op has no results; its trailing
    memref operands are the destinations. Inputs may be tensors or memrefs."""
    if op.results:
        return list(op.operands), []
    k = len(op.operands) - num_results(op.mnemonic)
    return list(op.operands[:k]), list(op.operands[k:])


def _as_tensor_type(t):
    return t.as_tensor() if isinstance(t, MemRefType) else t


def _verify(op: Operation) -> None:
    ins, outs = split_dps(op)
    in_types = [_as_tensor_type(v.type) for v in ins]
    expected = infer(op.mnemonic, in_types, op.attrs)
    if op.results:
        got = [r.type for r in op.results]
    else:
        if not all(isinstance(v.type, MemRefType) for v in outs):
            raise VerifyError(f"{op.name}: needs results or destination buffers")
        got = [_as_tensor_type(v.type) for v in outs]
    if got != expected:
        raise VerifyError(
            f"{op.name}: result types ({', '.join(map(str, got))}) do not match inferred "
            f"({', '.join(map(str, expected))})"
        )


# ---------------------------------------------------------------- semantics


def _i64(a) -> np.ndarray:
    return np.asarray(a).astype(np.int64)


def _logic(op: str, a, b=None):
    a = a != 0
    b = None if b is None else b != 0
    r = {
        "and": lambda: a & b,
        "or": lambda: a | b,
        "xor": lambda: a ^ b,
        "not": lambda: ~a,
        "nand": lambda: ~(a & b),
        "nor": lambda: ~(a | b),
    }[op]()
    return r.astype(np.int32)


def _topk(values, k):
    order = select_order(values, "desc")[:k]
    return [np.array(values[order], dtype=np.int32), np.asarray(order, dtype=np.int32)]


def _simsearch(q, corpus, metric, count):
    q64, c64 = _i64(q), _i64(corpus)
    if metric == "dot":
        scores = wrap32(c64 @ q64)
        order = select_order(scores, "desc")[:count]
    else:
        d = c64 - q64[None, :]
        scores = wrap32(wrap32(d * d).astype(np.int64).sum(axis=1))
        order = select_order(scores, "asc")[:count]
    return [np.array(scores[order], dtype=np.int32), np.asarray(order, dtype=np.int32)]


def _histogram(a, bins):
    idx = np.clip(_i64(a).reshape(-1), 0, bins - 1)
    return np.bincount(idx, minlength=bins).astype(np.int32)


def _scan(a, op):
    out = np.empty_like(a)
    acc = None
    fn = COMBINE[op]
    for i, v in enumerate(_i64(a)):
        acc = int(v) if acc is None else int(wrap32(fn(np.int64(acc), v)))
        out[i] = acc
    return out


def _reduce(a, op):
    flat = _i64(a).reshape(-1)
    if op == "sum":
        return wrap32(flat.sum())
    if op == "min":
        return wrap32(flat.min()) if flat.size else wrap32(IDENTITY["min"])
    if op == "max":
        return wrap32(flat.max()) if flat.size else wrap32(IDENTITY["max"])
    acc = np.int64(1)
    for v in flat:
        acc = np.int64(wrap32(acc * v))
    return wrap32(acc)


def _conv2d(x, f, attrs):
    (n, oh, ow, fo), (sh, sw), (ph, pw) = _conv_geometry(
        [TensorType(x.shape), TensorType(f.shape)], attrs
    )
    xp = np.pad(_i64(x), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    kh, kw, c, _ = f.shape
    f2 = _i64(f).reshape(kh * kw * c, fo)
    out = np.zeros((n, oh, ow, fo), dtype=np.int64)
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, i * sh : i * sh + kh, j * sw : j * sw + kw, :].reshape(n, -1)
            out[:, i, j, :] = patch @ f2
    return wrap32(out)


def evaluate(mnemonic: str, attrs: dict, vals: list) -> list[np.ndarray]:
    """Reference semantics of one cinm op on int32 arrays."""
    a = vals[0]
    if mnemonic == "add":
        return [wrap32(_i64(a) + _i64(vals[1]))]
    if mnemonic == "sub":
        return [wrap32(_i64(a) - _i64(vals[1]))]
    if mnemonic in ("gemm", "gemv"):
        return [wrap32(_i64(a) @ _i64(vals[1]))]
    if mnemonic == "min":
        return [wrap32(_i64(a).min())]
    if mnemonic == "max":
        return [wrap32(_i64(a).max())]
    if mnemonic == "logicop":
        return [_logic(str(attrs["op"]), *vals)]
    if mnemonic == "transpose":
        return [np.ascontiguousarray(a.T)]
    if mnemonic == "histogram":
        return [_histogram(a, attrs["bins"])]
    if mnemonic == "majority":
        return [np.asarray(int(np.count_nonzero(a)) * 2 > a.shape[0], dtype=np.int32)]
    if mnemonic == "topk":
        return _topk(a, attrs["k"])
    if mnemonic == "simSearch":
        return _simsearch(a, vals[1], str(attrs["metric"]), attrs["count"])
    if mnemonic == "mergePartial":
        if attrs["kind"] == "sum":
            return [wrap32(_i64(a) + _i64(vals[1]))]
        return [np.concatenate([a, vals[1]], axis=attrs.get("axis", 0))]
    if mnemonic == "popcount":
        return [np.asarray(np.count_nonzero(a), dtype=np.int32)]
    if mnemonic == "reduce":
        return [np.asarray(_reduce(a, str(attrs["op"])), dtype=np.int32)]
    if mnemonic == "scan":
        return [_scan(a, str(attrs["op"]))]
    if mnemonic == "conv2d":
        return [_conv2d(a, vals[1], attrs)]
    if mnemonic == "contract":
        inputs, out = parse_contraction(attrs["spec"])
        return [wrap32(np.einsum(f"{inputs[0]},{inputs[1]}->{out}", _i64(a), _i64(vals[1])))]
    raise KeyError(mnemonic)


def _handle(interp, op, vals, env):
    if op.results:
        return evaluate(op.mnemonic, op.attrs, vals)
    ins, outs = split_dps(op)
    n = len(ins)
    res = evaluate(op.mnemonic, op.attrs, vals[:n])
    for dst, r in zip(vals[n:], res):
        dst[...] = r
    return []


def register_compute_op(name: str) -> None:
    """Register ``name`` (``<dialect>.<cinm mnemonic>``) with cinm typing and semantics."""
    register_op(name, _verify)
    handler(name)(_handle)


for _name in INFER:
    register_compute_op(f"cinm.{_name}")


# ---------------------------------------------------------------- API


def result_types(mnemonic: str, operands, **attrs) -> list[TensorType]:
    return infer(mnemonic, [v.type for v in operands], attrs)


def build(b, mnemonic: str, operands, **attrs):
    """Create a cinm op with inferred result types; returns its results."""
    attrs = {k: (Token(v) if isinstance(v, str) and k in ("op", "kind", "metric") else v) for k, v in attrs.items()}
    types = infer(mnemonic, [v.type for v in operands], attrs)
    op = b.create(f"cinm.{mnemonic}", operands, types, attrs)
    return op.results[0] if len(op.results) == 1 else op.results


def interpret(func: Function, args: list) -> list[TensorValue]:
    """Run ``func`` (cinm + ir-core ops) on the reference interpreter."""
    for op in func.walk():
        if op.dialect not in ("", "cinm"):
            raise VerifyError(f"interpret: {op.name} is not a cinm or ir-core op")
    return run_function(func, args)
