import numpy as np
from hypothesis import strategies as st

from cinm.dialects import cinm as cinm_dialect
from cinm.dialects.cinm import CinmOpKind, supported
from cinm.interp import run_function
from cinm.ir import Builder, Function, IrModule, Region, TensorType, verify_module
from cinm.ir.types import I1, I32


def single_op_module(mnemonic, arg_types, **attrs):
    """A module with ``@main`` applying one cinm op to its arguments."""
    body = Region(arg_types)
    b = Builder(body)
    res = cinm_dialect.build(b, mnemonic, body.args, **attrs)
    res = list(res) if isinstance(res, list) else [res]
    b.create("return", res)
    m = IrModule([Function("main", body, [r.type for r in res])])
    verify_module(m)
    return m


def t(*shape, elem=I32):
    return TensorType(shape, elem)


def bits(*shape):
    return TensorType(shape, I1)


def rand(rng, shape, lo=-50, hi=50):
    return rng.integers(lo, hi, size=shape).astype(np.int64)


def run(m, args, fn="main"):
    """Execute any dialect level; cinm-only modules go through ``interpret``."""
    f = m.function(fn)
    if all(op.dialect in ("", "cinm") for op in f.walk()):
        return [v.data.tolist() for v in cinm_dialect.interpret(f, args)]
    return [v.data.tolist() for v in run_function(f, args)]


CNM_KINDS = [k.value for k in CinmOpKind if supported(k, "cnm")]


@st.composite
def cnm_cases(draw):
    kind = draw(st.sampled_from(CNM_KINDS))
    m, n = draw(st.integers(1, 9)), draw(st.integers(1, 9))
    wg = draw(st.sampled_from(["4x16", "2x3", "1x4", "5", "2x2x2"]))
    if kind in ("add", "sub"):
        return kind, [t(m, n), t(m, n)], {}, wg
    if kind == "gemm":
        return kind, [t(m, n), t(n, 3)], {}, wg
    if kind == "gemv":
        return kind, [t(m, n), t(n)], {}, wg
    if kind in ("min", "max", "transpose"):
        return kind, [t(m, n)], {}, wg
    if kind == "logicop":
        op = draw(st.sampled_from(["and", "or", "xor", "not", "nand", "nor"]))
        return kind, [bits(m, n)] * (1 if op == "not" else 2), {"op": op}, wg
    if kind == "histogram":
        return kind, [t(m * n)], {"bins": draw(st.integers(1, 6))}, wg
    if kind == "majority":
        return kind, [bits(m * n)], {}, wg
    if kind == "topk":
        return kind, [t(m * n)], {"k": draw(st.integers(0, m * n))}, wg
    if kind == "simSearch":
        metric = draw(st.sampled_from(["dot", "l2"]))
        return kind, [t(n), t(m, n)], {"metric": metric, "count": draw(st.integers(0, m))}, wg
    if kind == "mergePartial":
        if draw(st.booleans()):
            return kind, [t(m, n), t(m, n)], {"kind": "sum", "axis": 0}, wg
        return kind, [t(m, n), t(2, n)], {"kind": "concat", "axis": 0}, wg
    op = draw(st.sampled_from(["sum", "prod", "min", "max"]))
    return kind, [t(m * n)], {"op": op}, wg


def cnm_args(types, rng):
    return [rng.integers(0, 2, ty.shape) if ty.elem.value == "i1" else rng.integers(-4, 9, ty.shape) for ty in types]
