"""Rewrites of the staging ops ``cinm.conv2d`` and ``cinm.contract`` into gemm."""

from __future__ import annotations

from math import prod

from .dialects import cinm as C
from .dialects.core import affine, build_nest, const, extract, fill, insert, reshape
from .ir import IrModule, TensorType, VerifyError, register_pass, rewrite_op


def _ops_named(m: IrModule, name: str):
    return [op for op in m.walk() if op.name == name]


def _keep_target(src, v):
    # a device assignment made on the staging op carries over to its gemm
    if "target" in src.attrs:
        v.owner.attrs["target"] = src.attrs["target"]
    return v


def _conv(op):
    x, f = op.operands
    if op.attrs.get("strides", [1, 1]) != [1, 1] or op.attrs.get("padding", [0, 0]) != [0, 0]:
        raise VerifyError("cinm.conv2d: unsupported conv form")
    n, h, w, c = x.type.shape
    kh, kw, _, fo = f.type.shape
    oh, ow = h - kh + 1, w - kw + 1
    patch = kh * kw * c

    def build(b):
        cols = fill(b, TensorType((n * oh * ow, patch)))

        def body(bb, ivs, carried):
            zero = const(bb, 0)
            window = extract(bb, x, [*ivs, zero], [1, kh, kw, c])
            row = affine(bb, ivs, [oh * ow, ow, 1])
            return [insert(bb, reshape(bb, window, [1, patch]), carried[0], [row, zero])]

        (cols,) = build_nest(b, [n, oh, ow], [cols], body)
        g = _keep_target(op, C.build(b, "gemm", [cols, reshape(b, f, [patch, fo])]))
        return reshape(b, g, [n, oh, ow, fo])

    rewrite_op(op, build)


@register_pass("conv-to-gemm")
def rewrite_conv2d_to_gemm(m: IrModule) -> IrModule:
    """im2col expansion followed by one gemm per convolution."""
    for op in _ops_named(m, "cinm.conv2d"):
        _conv(op)
    return m


def contraction_plan(spec: str):
    """Factor a two-operand contraction as (free_a x K) . (K x free_b).

    Returns (free_a, free_b, contracted) index lists; free indices follow the
    output order and contracted indices follow the first operand.
    """
    (ia, ib), out = C.parse_contraction(spec)
    if len(set(out)) != len(out):
        raise VerifyError(f"cinm.contract: repeated output index in '{spec}'")
    for idx in (ia, ib):
        if len(set(idx)) != len(idx):
            raise VerifyError(f"cinm.contract: repeated index within operand '{idx}'")
    for ch in out:
        if ch in ia and ch in ib:
            raise VerifyError(f"cinm.contract: batch index '{ch}' is not supported")
    for ch in set(ia) ^ set(ib):
        if ch not in out:
            raise VerifyError(f"cinm.contract: index '{ch}' is summed over a single operand")
    free_a = [ch for ch in out if ch in ia]
    free_b = [ch for ch in out if ch in ib]
    contracted = [ch for ch in ia if ch not in out]
    return free_a, free_b, contracted


def _permute(b, v, idx: str, order: list):
    perm = [idx.index(ch) for ch in order]
    if perm == list(range(len(perm))):
        return v
    return b("permute", [v], TensorType([v.type.shape[p] for p in perm], v.type.elem), perm=perm)


def _contract(op):
    spec = op.attrs["spec"]
    free_a, free_b, contracted = contraction_plan(spec)
    (ia, ib), out = C.parse_contraction(spec)
    a, bt = op.operands
    ext = dict(zip(ia, a.type.shape)) | dict(zip(ib, bt.type.shape))
    m = prod(ext[c] for c in free_a)
    k = prod(ext[c] for c in contracted)
    n = prod(ext[c] for c in free_b)

    def build(b):
        lhs = reshape(b, _permute(b, a, ia, free_a + contracted), [m, k])
        rhs = reshape(b, _permute(b, bt, ib, contracted + free_b), [k, n])
        g = _keep_target(op, C.build(b, "gemm", [lhs, rhs]))
        order = free_a + free_b
        g = reshape(b, g, [ext[c] for c in order])
        return _permute(b, g, "".join(order), list(out))

    rewrite_op(op, build)


@register_pass("contract-to-gemm")
def rewrite_contraction_to_gemm(m: IrModule) -> IrModule:
    """Permute/reshape both operands so a single gemm computes the contraction."""
    for op in _ops_named(m, "cinm.contract"):
        _contract(op)
    return m
