"""cinm -> cim: crossbar-sized tiling, device wrapping and the two
scheduling passes (write minimisation and device-level parallelism)."""

from __future__ import annotations

from ..dialects import cinm as C
from ..dialects.cim import DEFAULT_POOL, DEFAULT_XBAR, TOKEN, device_type, kernel_of
from ..dialects.core import fill, reshape
from ..ir import I32, Builder, IrModule, Operation, Region, TensorType, Token, VerifyError, register_pass, rewrite_op
from ..ir.core import defined_in
from ..ir.passes import parse_dims
from ..rewrites import rewrite_contraction_to_gemm, rewrite_conv2d_to_gemm
from ..xform import StructuredLoopNest, TileSpec, interchange, tile_op, trip_count, unroll_loop
from ..targetsel import target_paradigm
from .to_cnm import _in_launch

KERNELS = ("gemm", "gemv")


def _host_ops(f):
    return [op for op in f.walk() if op.dialect == "cinm" and not _in_launch(op)
            and target_paradigm(op) in (None, "cim")]


def _popcount_as_gemv(b, op):
    # Counting set bits is a matrix-vector product of the bits with a ones column.
    (x,) = op.operands
    n = x.type.element_count
    row = reshape(b, b("cast", [x], TensorType(x.type.shape, I32)), [1, n])
    counts = C.build(b, "gemv", [row, fill(b, TensorType((n,)), 1)])
    return [reshape(b, counts, [])]


def _dot_search_as_gemv(b, op):
    q, corpus = op.operands
    scores = C.build(b, "gemv", [corpus, q])
    k = op.attrs["count"]
    r = b.create("rank", [scores], [TensorType((k,)), TensorType((k,))], {"k": k, "order": Token("desc")})
    return list(r.results)


def wrap_kernel(op: Operation, xbar) -> Operation:
    """Replace a tile-sized gemm/gemv by acquire/execute/barrier/release."""
    box = {}

    def build(b):
        dev = b("cim.acquire", [], device_type(*xbar))
        body = Region([v.type for v in op.operands])
        rb = Builder(body)
        rb.create("yield", [C.build(rb, op.mnemonic, body.args)])
        ex = b.create("cim.execute", [dev, *op.operands], [TOKEN, op.result.type], regions=[body])
        b.create("cim.barrier", [dev, ex.results[0]])
        b.create("cim.release", [dev])
        box["ex"] = ex
        return [ex.results[1]]

    rewrite_op(op, build)
    return box["ex"]


def lower_function(f, xbar) -> None:
    rows, cols = xbar
    for op in _host_ops(f):
        if op.mnemonic in C.STAGING:
            raise VerifyError(f"{op.name}: staging op must be rewritten to gemm before lowering")
        kind = C.kind_of(op)
        if kind is None or not C.supported(kind, "cim"):
            raise VerifyError(f"{op.name}: not CIM-supported (support matrix has no cim mark)")
    for op in _host_ops(f):
        if op.mnemonic == "popcount" and op.operands[0].type.element_count:
            rewrite_op(op, lambda b: _popcount_as_gemv(b, op))
        elif op.mnemonic == "simSearch" and str(op.attrs["metric"]) == "dot" and op.operands[1].type.element_count:
            rewrite_op(op, lambda b: _dot_search_as_gemv(b, op))
    for op in _host_ops(f):
        if op.mnemonic not in KERNELS or any(v.type.element_count == 0 for v in op.operands):
            continue
        sizes = (rows, cols, rows) if op.mnemonic == "gemm" else (rows, cols)
        tile_op(op, TileSpec("box", sizes))
    for op in _host_ops(f):
        if op.mnemonic in KERNELS and not any(v.type.element_count == 0 for v in op.operands):
            wrap_kernel(op, xbar)


@register_pass("cinm-to-cim")
def lower_cinm_to_cim(m: IrModule, xbar="128x128") -> IrModule:
    dims = parse_dims(xbar, DEFAULT_XBAR)
    if len(dims) != 2 or min(dims) <= 0:
        raise VerifyError("cinm-to-cim: crossbar must be RxC with positive extents")
    m = rewrite_contraction_to_gemm(rewrite_conv2d_to_gemm(m))
    for f in m.functions:
        lower_function(f, dims)
    return m


# ---------------------------------------------------------------- write minimisation


def _roles(nest: StructuredLoopNest, ex: Operation) -> list[str] | None:
    """Role of each loop of a gemm tile nest: i (rows of A), j (cols of B), k."""
    a_tile, b_tile = (v.owner for v in ex.operands[1:])
    if not all(isinstance(t, Operation) and t.name == "extract_slice" for t in (a_tile, b_tile)):
        return None
    roles = []
    for loop in nest.loops:
        iv = loop.regions[0].args[0]
        if a_tile.operands[1] is iv:
            roles.append("i")
        elif b_tile.operands[2] is iv:
            roles.append("j")
        elif a_tile.operands[2] is iv:
            roles.append("k")
        else:
            return None
    return roles


def _executes(op: Operation):
    return [o for o in op.walk() if o.name == "cim.execute"]


def minimise_writes(root: Operation) -> bool:
    """Reorder a gemm tile nest to (k, j, i) and keep each programmed B tile
    on its device across the whole i loop. Returns whether anything changed."""
    nest = StructuredLoopNest(root)
    loops = nest.loops
    if any(loop.attrs.get("min_writes") for loop in loops):
        return False
    exs = _executes(root)
    if len(exs) != 1 or exs[0].parent is not nest.body:
        return False
    ex = exs[0]
    if kernel_of(ex).mnemonic != "gemm":
        return False
    roles = _roles(nest, ex)
    if roles is None:
        return False
    order = {"k": 0, "j": 1, "i": 2}
    perm = sorted(range(len(loops)), key=lambda lvl: order[roles[lvl]])
    interchange(nest, perm)
    roles = [roles[p] for p in perm]
    loops[0].attrs["min_writes"] = 1
    if roles[-1] != "i":
        return True
    inner = loops[-1]
    body = inner.regions[0]
    dev_op = ex.operands[0].owner
    b_tile = ex.operands[2].owner
    release = next(o for o in body.ops if o.name == "cim.release" and o.operands[0] is dev_op.result)
    if any(defined_in(v, body) for v in b_tile.operands):
        return True
    parent = inner.parent
    for o in (b_tile, dev_op, release):
        body.ops.remove(o)
    at = parent.ops.index(inner)
    parent.insert(at, dev_op)
    parent.insert(at, b_tile)
    parent.insert(parent.ops.index(inner) + 1, release)
    return True


def _tile_roots(f):
    return [op for op in f.walk() if op.name == "for" and op.attrs.get("tile")
            and not (op.parent.parent_op is not None and op.parent.parent_op.name == "for"
                     and op.parent.parent_op.attrs.get("tile"))]


@register_pass("cim-min-writes")
def min_writes_pass(m: IrModule) -> IrModule:
    for f in m.functions:
        for root in _tile_roots(f):
            minimise_writes(root)
    return m


# ---------------------------------------------------------------- parallel devices


def _group(region: Region, lo: int, hi: int) -> None:
    """Within region.ops[lo:hi], hoist acquires to the front and sink releases
    to the back, so the copies hold their devices concurrently."""
    span = region.ops[lo:hi]
    acq = [o for o in span if o.name == "cim.acquire"]
    rel = [o for o in span if o.name == "cim.release"]
    rest = [o for o in span if o not in acq and o not in rel]
    region.ops[lo:hi] = acq + rest + rel


def parallelise(loop: Operation, factor: int) -> int:
    """Unroll ``loop`` so up to ``factor`` devices work at once; when it is
    unrolled away, keep widening through the enclosing tile loop. Returns the
    number of devices held concurrently."""
    width = 1
    while loop is not None and factor // width > 1:
        trips = trip_count(loop)
        f = max(d for d in range(1, min(factor // width, trips) + 1) if trips % d == 0)
        if f <= 1:
            break
        region = loop.parent
        outer = region.parent_op
        at, before = region.ops.index(loop), len(region.ops)
        width *= f
        if unroll_loop(loop, f) is not None:
            body = loop.regions[0]
            _group(body, 0, len(body.ops) - 1)
            loop.attrs["parallel"] = f
            break
        _group(region, at, at + len(region.ops) - before + 1)
        loop = outer if outer is not None and outer.name == "for" and outer.attrs.get("tile") else None
    return width


@register_pass("cim-parallel")
def parallel_pass(m: IrModule, factor=str(DEFAULT_POOL)) -> IrModule:
    factor = int(factor)
    if factor <= 0:
        raise VerifyError("cim-parallel: factor must be positive")
    for f in m.functions:
        loops = [op for op in f.walk() if op.name == "for" and not op.attrs.get("parallel")
                 and any(o.name == "cim.acquire" for o in op.regions[0].ops)]
        for loop in loops:
            parallelise(loop, factor)
    return m
