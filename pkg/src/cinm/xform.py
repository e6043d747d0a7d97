"""Tiling, loop interchange, unrolling and bufferization of cinm programs."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

from .dialects import cinm as C
from .dialects.core import IDENTITY, affine, build_nest, const, crop, extract, fill, insert, pad_to, reshape
from .ir import (
    Builder,
    IRError,
    IrModule,
    MemRefType,
    Operation,
    Region,
    TensorType,
    clone_ops,
    register_pass,
    rewrite_op,
)
from .ir.core import root_region
from .ir.passes import parse_dims

TILEABLE = ("gemm", "gemv", "add", "sub", "reduce")


class TilingError(IRError):
    pass


@dataclass
class TileSpec:
    shape: str  # "box" | "rect"
    sizes: tuple
    pad_value: int = 0

    def __post_init__(self):
        if self.shape not in ("box", "rect"):
            raise TilingError(f"unknown tile shape '{self.shape}' (box|rect)")
        self.sizes = tuple(int(s) for s in self.sizes)
        if not self.sizes or min(self.sizes) <= 0:
            raise TilingError("tile sizes must be positive")


@dataclass
class StructuredLoopNest:
    """A perfect nest rooted at ``root`` (a ``for`` op, or None when every
    tile loop had a single iteration)."""

    root: Operation | None
    tiled_ops: list = field(default_factory=list)

    @property
    def loops(self) -> list[Operation]:
        out, op = [], self.root
        while op is not None and op.name == "for":
            out.append(op)
            body = op.regions[0].ops
            if len(body) == 2 and body[0].name == "for" and body[1].operands == body[0].results:
                op = body[0]
            else:
                break
        return out

    @property
    def body(self) -> Region | None:
        loops = self.loops
        return loops[-1].regions[0] if loops else None

    def trip_counts(self) -> list[int]:
        return [trip_count(op) for op in self.loops]


def trip_count(loop: Operation) -> int:
    a = loop.attrs
    return max(0, ceil((a["upper"] - a["lower"]) / a["step"]))


# ---------------------------------------------------------------- tiling


def _clamp(sizes, extents):
    return [min(s, e) for s, e in zip(sizes, extents)]


def _up(x, t):
    return ceil(x / t) * t


def _tile_gemm(b, op, spec):
    a, bm = op.operands
    m, k = a.type.shape
    n = bm.type.shape[1]
    if spec.shape == "rect":
        (tm,) = _clamp(spec.sizes[:1], [m])
        mp = _up(m, tm)
        ap = pad_to(b, a, [mp, k], spec.pad_value)
        zero = const(b, 0)

        def body(bb, ivs, carried):
            (i,) = ivs
            p = C.build(bb, "gemm", [extract(bb, ap, [i, zero], [tm, k]), bm])
            return [insert(bb, p, carried[0], [i, zero])]

        (res,) = build_nest(b, [mp], [fill(b, TensorType((mp, n)))], body, [tm], {"tile": 1})
        return crop(b, res, [m, n])
    if len(spec.sizes) != 3:
        raise TilingError("box tiling of gemm needs three sizes (m, n, k)")
    tm, tn, tk = _clamp(spec.sizes, [m, n, k])
    mp, np_, kp = _up(m, tm), _up(n, tn), _up(k, tk)
    ap = pad_to(b, a, [mp, kp], spec.pad_value)
    bp = pad_to(b, bm, [kp, np_], spec.pad_value)

    def body(bb, ivs, carried):
        i, j, kk = ivs
        p = C.build(bb, "gemm", [extract(bb, ap, [i, kk], [tm, tk]), extract(bb, bp, [kk, j], [tk, tn])])
        cur = extract(bb, carried[0], [i, j], [tm, tn])
        s = C.build(bb, "mergePartial", [cur, p], kind="sum", axis=0)
        return [insert(bb, s, carried[0], [i, j])]

    (res,) = build_nest(b, [mp, np_, kp], [fill(b, TensorType((mp, np_)))], body, [tm, tn, tk], {"tile": 1})
    return crop(b, res, [m, n])


def _tile_gemv(b, op, spec):
    a, x = op.operands
    m, k = a.type.shape
    if spec.shape == "rect":
        (tm,) = _clamp(spec.sizes[:1], [m])
        tk = k
    else:
        if len(spec.sizes) != 2:
            raise TilingError("box tiling of gemv needs two sizes (m, k)")
        tm, tk = _clamp(spec.sizes, [m, k])
    mp, kp = _up(m, tm), _up(k, tk)
    ap = pad_to(b, a, [mp, kp], spec.pad_value)
    xp = pad_to(b, x, [kp], spec.pad_value)

    def body(bb, ivs, carried):
        i, kk = ivs
        p = C.build(bb, "gemv", [extract(bb, ap, [i, kk], [tm, tk]), extract(bb, xp, [kk], [tk])])
        cur = extract(bb, carried[0], [i], [tm])
        s = C.build(bb, "mergePartial", [cur, p], kind="sum", axis=0)
        return [insert(bb, s, carried[0], [i])]

    (res,) = build_nest(b, [mp, kp], [fill(b, TensorType((mp,)))], body, [tm, tk], {"tile": 1})
    return crop(b, res, [m])


def _tile_elementwise(b, op, spec):
    x, y = op.operands
    shape = list(x.type.shape)
    if len(spec.sizes) > len(shape):
        raise TilingError(f"{op.name}: more tile sizes than dimensions")
    sizes = _clamp(spec.sizes, shape) + shape[len(spec.sizes):]
    padded = [_up(d, s) for d, s in zip(shape, sizes)]
    xp, yp = pad_to(b, x, padded, spec.pad_value), pad_to(b, y, padded, spec.pad_value)

    def body(bb, ivs, carried):
        p = C.build(bb, op.mnemonic, [extract(bb, xp, ivs, sizes), extract(bb, yp, ivs, sizes)])
        return [insert(bb, p, carried[0], ivs)]

    (res,) = build_nest(b, padded, [fill(b, TensorType(padded, x.type.elem))], body, sizes, {"tile": 1})
    return crop(b, res, shape)


def _tile_reduce(b, op, spec):
    (x,) = op.operands
    kind = str(op.attrs["op"])
    shape = list(x.type.shape)
    if len(spec.sizes) > len(shape):
        raise TilingError(f"{op.name}: more tile sizes than dimensions")
    sizes = _clamp(spec.sizes, shape) + shape[len(spec.sizes):]
    padded = [_up(d, s) for d, s in zip(shape, sizes)]
    # Padding must not change the result, so it uses the reduction identity.
    xp = pad_to(b, x, padded, IDENTITY[kind])

    def body(bb, ivs, carried):
        p = C.build(bb, "reduce", [extract(bb, xp, ivs, sizes)], op=kind)
        pair = C.build(bb, "mergePartial", [carried[0], reshape(bb, p, [1])], kind="concat", axis=0)
        return [reshape(bb, C.build(bb, "reduce", [pair], op=kind), [1])]

    init = fill(b, TensorType((1,)), IDENTITY[kind])
    (res,) = build_nest(b, padded, [init], body, sizes, {"tile": 1})
    return reshape(b, res, [])


_TILERS = {"gemm": _tile_gemm, "gemv": _tile_gemv, "add": _tile_elementwise, "sub": _tile_elementwise,
           "reduce": _tile_reduce}


def tile_op(op: Operation, spec: TileSpec) -> StructuredLoopNest:
    """Replace ``op`` in place by a tile loop nest; returns that nest."""
    if op.dialect != "cinm" or op.mnemonic not in TILEABLE:
        raise TilingError(f"{op.name} is not tileable (tileable: {', '.join(TILEABLE)})")
    if any(d == 0 for v in op.operands for d in v.type.shape):
        raise TilingError(f"{op.name}: cannot tile zero-size operands")
    region = op.parent
    start, before = region.ops.index(op), len(region.ops)
    rewrite_op(op, lambda b: _TILERS[op.mnemonic](b, op, spec))
    created = region.ops[start: start + len(region.ops) - before + 1]
    root = next((o for o in created if o.name == "for" and o.attrs.get("tile")), None)
    nest = StructuredLoopNest(root)
    scope = root.walk() if root else []
    nest.tiled_ops = [o for o in scope if o.name == op.name]
    return nest


def top_level_ops(m: IrModule, pred):
    return [op for f in m.functions for op in list(f.body.ops) if pred(op)]


@register_pass("cinm-tile")
def tile_pass(m: IrModule, shape="box", sizes="32x32x32", pad="0") -> IrModule:
    spec = TileSpec(shape, parse_dims(sizes), int(pad))
    for op in top_level_ops(m, lambda o: o.dialect == "cinm" and o.mnemonic in TILEABLE):
        if any(d == 0 for v in op.operands for d in v.type.shape):
            continue
        local = spec
        if op.mnemonic in ("add", "sub", "reduce"):
            rank = op.operands[0].type.rank
            local = TileSpec(spec.shape, spec.sizes[:max(1, rank)] if rank else (1,), spec.pad_value)
            if rank == 0:
                continue
        elif op.mnemonic == "gemv" and spec.shape == "box":
            sz = spec.sizes
            local = TileSpec("box", (sz[0], sz[2]) if len(sz) == 3 else sz, spec.pad_value)
        tile_op(op, local)
    return m


# ---------------------------------------------------------------- interchange


def interchange(nest: StructuredLoopNest, perm) -> StructuredLoopNest:
    """Reorder the loops of a perfect nest in place: new level i runs the
    former loop perm[i]. Legal for tile nests since their merges commute."""
    loops = nest.loops
    perm = [int(p) for p in perm]
    if len(perm) != len(loops) or sorted(perm) != list(range(len(loops))):
        raise TilingError(f"invalid permutation {perm} for a nest of depth {len(loops)}")
    if perm == list(range(len(loops))):
        return nest
    headers = [dict(op.attrs) for op in loops]
    ivs = [op.regions[0].args[0] for op in loops]
    new_iv = {ivs[perm[lvl]]: ivs[lvl] for lvl in range(len(loops))}
    for lvl, op in enumerate(loops):
        op.attrs = dict(headers[perm[lvl]])
    for op in loops[-1].regions[0].walk():
        op.operands = [new_iv.get(v, v) for v in op.operands]
    return nest


def _nests(m: IrModule):
    return [StructuredLoopNest(op) for op in top_level_ops(m, lambda o: o.name == "for")]


@register_pass("interchange")
def interchange_pass(m: IrModule, perm="") -> IrModule:
    perm = [int(p) for p in str(perm).replace("x", " ").replace(":", " ").split()]
    matched = False
    for nest in _nests(m):
        if len(nest.loops) == len(perm):
            interchange(nest, perm)
            matched = True
    if not matched and _nests(m):
        raise TilingError(f"invalid permutation length {len(perm)}: no loop nest of that depth")
    return m


# ---------------------------------------------------------------- unroll


def unroll_loop(loop: Operation, factor: int) -> Operation | None:
    """Unroll ``loop`` by ``factor`` in place; returns the loop, or None when
    it was fully unrolled away."""
    if factor <= 0:
        raise TilingError("unroll factor must be positive")
    trips = trip_count(loop)
    if factor == 1:
        return loop
    if trips % factor:
        raise TilingError(f"unroll factor {factor} does not divide trip count {trips}")
    lo, step = loop.attrs["lower"], loop.attrs["step"]
    body = loop.regions[0]
    iv, carried_args = body.args[0], body.args[1:]
    inner_ops, term = body.ops[:-1], body.ops[-1]

    def replicate(b: Builder, iv_for, carried, copies):
        for u in range(copies):
            mapping = dict(zip(carried_args, carried))
            mapping[iv] = iv_for(b, u)
            for op in clone_ops(inner_ops, mapping):
                b.add(op)
            carried = [mapping.get(v, v) for v in term.operands]
        return carried

    if factor == trips:
        def full(b):
            return replicate(b, lambda bb, u: const(bb, lo + u * step), list(loop.operands), trips)

        rewrite_op(loop, full)
        return None

    new_body = Region([a.type for a in body.args])
    nb = Builder(new_body)
    out = replicate(
        nb,
        lambda bb, u: new_body.args[0] if u == 0 else affine(bb, [new_body.args[0]], [1], u * step),
        list(new_body.args[1:]),
        factor,
    )
    nb.create("yield", out)
    loop.regions = [new_body]
    new_body.parent_op = loop
    loop.attrs["step"] = step * factor
    return loop


def unroll(nest: StructuredLoopNest, loop_index: int, factor: int) -> StructuredLoopNest:
    loops = nest.loops
    if not -len(loops) <= loop_index < len(loops):
        raise TilingError(f"loop index {loop_index} out of range for nest of depth {len(loops)}")
    target = loops[loop_index]
    res = unroll_loop(target, factor)
    if res is None and target is nest.root:
        return StructuredLoopNest(None)
    return nest


@register_pass("unroll")
def unroll_pass(m: IrModule, loop="-1", factor="2") -> IrModule:
    for nest in _nests(m):
        unroll(nest, int(loop), int(factor))
    return m


# ---------------------------------------------------------------- bufferize


def _bufferize_op(op: Operation) -> None:
    region = op.parent
    b = Builder(region, region.ops.index(op))
    bufs = [b("alloc", [], MemRefType(r.type.shape, r.type.elem)) for r in op.results]
    dps = b.create(op.name, list(op.operands) + bufs, [], dict(op.attrs))
    root = root_region(op)
    for res, buf in zip(op.results, bufs):
        users = [u for u in root.walk() if any(v is res for v in u.operands)]
        loaded = None
        for u in users:
            if u.dialect == "cinm":
                u.operands = [buf if v is res else v for v in u.operands]
                continue
            if loaded is None:
                loaded = Builder(region, region.ops.index(dps) + 1)("load", [buf], res.type)
            u.operands = [loaded if v is res else v for v in u.operands]
    region.ops.remove(op)


@register_pass("bufferize")
def bufferize(m: IrModule) -> IrModule:
    """Give every cinm tensor result its own host buffer (no reuse) and
    switch the op to destination-passing form."""
    for op in [o for o in m.walk() if o.dialect == "cinm" and o.results]:
        _bufferize_op(op)
    return m

