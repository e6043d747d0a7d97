"""The ``cnm`` dialect: workgroups, opaque distributed buffers, scatter/gather
and per-leaf kernel launches.

A buffer at level L of a workgroup with dims D has one instance per prefix
D[:L]; level 0 is shared by every leaf (broadcast), level len(D) is private
to a leaf. A leaf sees exactly the instances on its path to the root.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from ..interp import ExecutionError, handler
from ..ir import (
    INDEX,
    BufferType,
    Function,
    Operation,
    OpaqueType,
    TensorType,
    VerifyError,
    WorkgroupType,
    register_function_check,
    register_op,
)
from ..ir.core import defined_in
from ..ir.verifier import expect

TOKEN = OpaqueType("cnm.token")


# ---------------------------------------------------------------- affine maps


class MapError(VerifyError):
    pass


_TOKEN_RE = re.compile(r"\s*(?:(\d+)|([A-Za-z_]\w*)|(->|[-+*(),]))")


def _tokenize(text: str):
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            raise MapError(f"malformed affine map '{text}' at column {pos + 1}")
        out.append(int(m.group(1)) if m.group(1) else (m.group(2) or m.group(3)))
        pos = m.end()
    return out


class _MapParser:
    def __init__(self, text):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, want=None):
        tok = self.peek()
        if want is not None and tok != want:
            raise MapError(f"malformed affine map '{self.text}': expected '{want}'")
        self.i += 1
        return tok

    def names(self):
        self.take("(")
        out = []
        while self.peek() != ")":
            name = self.take()
            if not isinstance(name, str) or not name.isidentifier():
                raise MapError(f"malformed affine map '{self.text}': bad dimension name")
            out.append(name)
            if self.peek() == ",":
                self.take()
        self.take(")")
        return out

    def expr(self):
        acc = self.term()
        while self.peek() in ("+", "-"):
            sign = 1 if self.take() == "+" else -1
            acc = _lin_add(acc, _lin_scale(self.term(), sign))
        return acc

    def term(self):
        acc = self.factor()
        while self.peek() == "*":
            self.take()
            rhs = self.factor()
            if _lin_const(acc) is not None:
                acc = _lin_scale(rhs, _lin_const(acc))
            elif _lin_const(rhs) is not None:
                acc = _lin_scale(acc, _lin_const(rhs))
            else:
                raise MapError(f"non-linear term in affine map '{self.text}'")
        return acc

    def factor(self):
        tok = self.take()
        if isinstance(tok, int):
            return {None: tok}
        if tok == "-":
            return _lin_scale(self.factor(), -1)
        if tok == "(":
            e = self.expr()
            self.take(")")
            return e
        if isinstance(tok, str) and tok.isidentifier():
            return {tok: 1}
        raise MapError(f"malformed affine map '{self.text}': unexpected '{tok}'")


def _lin_add(a, b):
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0) + v
    return {k: v for k, v in out.items() if v != 0}


def _lin_scale(a, c):
    return {k: v * c for k, v in a.items() if v * c != 0}


def _lin_const(a):
    if all(k is None for k in a):
        return a.get(None, 0)
    return None


@dataclass(frozen=True)
class AffineMap:
    """``(d0, d1, ...) -> (expr, ...)`` with integer-linear result expressions."""

    dims: tuple
    exprs: tuple  # each a tuple of (name-or-None, coeff) pairs

    @classmethod
    def parse(cls, text: str) -> "AffineMap":
        p = _MapParser(text)
        dims = p.names()
        p.take("->")
        p.take("(")
        exprs = []
        while p.peek() != ")":
            exprs.append(p.expr())
            if p.peek() == ",":
                p.take()
        p.take(")")
        if p.peek() is not None:
            raise MapError(f"trailing input in affine map '{text}'")
        for e in exprs:
            for k in e:
                if k is not None and k not in dims:
                    raise MapError(f"unknown dimension '{k}' in affine map '{text}'")
        return cls(tuple(dims), tuple(tuple(sorted(e.items(), key=lambda kv: _order(dims, kv[0]))) for e in exprs))

    @classmethod
    def of(cls, dims, exprs) -> "AffineMap":
        return cls.parse(f"({', '.join(dims)}) -> ({', '.join(exprs)})")

    def __str__(self) -> str:
        return f"({', '.join(self.dims)}) -> ({', '.join(_fmt(e) for e in self.exprs)})"

    def evaluate(self, coords: list) -> list:
        """Apply the map to per-dimension index arrays (broadcasting)."""
        env = dict(zip(self.dims, coords))
        out = []
        for e in self.exprs:
            acc = np.zeros(np.shape(coords[0]) if coords else (), dtype=np.int64)
            for name, c in e:
                acc = acc + (c if name is None else c * np.asarray(env[name], dtype=np.int64))
            out.append(acc)
        return out


def _order(dims, name):
    return len(dims) if name is None else dims.index(name)


def _fmt(expr) -> str:
    if not expr:
        return "0"
    parts = []
    for name, c in expr:
        body = str(abs(c)) if name is None else (name if abs(c) == 1 else f"{name} * {abs(c)}")
        if not parts:
            parts.append(body if c > 0 else f"-{body}")
        else:
            parts.append(("+ " if c > 0 else "- ") + body)
    return " ".join(parts)


def leaf_dims(n: int) -> list[str]:
    return [f"l{i}" for i in range(n)]


def elem_dims(n: int) -> list[str]:
    return [f"e{i}" for i in range(n)]


def leaf_linear(dims) -> str:
    """Expression for the row-major linear id of a leaf coordinate."""
    expr = "0"
    for i, d in enumerate(dims):
        expr = f"l{i}" if i == 0 else f"({expr}) * {d} + l{i}"
    return expr


def domain(buf: BufferType) -> tuple:
    return tuple(buf.wg[: buf.level]) + tuple(buf.shape)


def domain_coords(buf: BufferType) -> list:
    """Flat index arrays enumerating every (instance, element) position."""
    ext = domain(buf)
    return [g.ravel() for g in np.indices(ext, dtype=np.int64)] if ext else []


def _empty(buf: BufferType) -> bool:
    return int(np.prod(domain(buf))) == 0


def check_map(op: Operation, amap: AffineMap, buf: BufferType, host: TensorType, what: str) -> None:
    ext = domain(buf)
    expect(len(amap.dims) == len(ext), op,
           f"map needs {len(ext)} dimensions (leaf coordinates above level {buf.level} plus element indices)")
    expect(len(amap.exprs) == host.rank, op, f"map must produce {host.rank} host indices")
    if _empty(buf):
        return
    idx = amap.evaluate(domain_coords(buf))
    for arr, d in zip(idx, host.shape):
        expect(bool((arr >= 0).all() and (arr < d).all()), op, f"{what} map out of bounds")
    if host.rank == 0:
        expect(int(np.prod(ext)) == 1, op, f"overlapping {what}")
        return
    flat = np.ravel_multi_index([a.ravel() for a in idx], host.shape)
    expect(len(np.unique(flat)) == flat.size, op, f"overlapping {what}")


# ---------------------------------------------------------------- ops


def _v_allocate(op):
    dims = op.attrs.get("dims")
    expect(isinstance(dims, list) and len(dims) >= 1, op, "needs 'dims' with at least one level")
    expect(all(d > 0 for d in dims), op, "workgroup extents must be positive")
    expect(op.result.type == WorkgroupType(dims), op, "result must be the workgroup type of 'dims'")


def _v_alloc_buffer(op):
    wg = op.operands[0].type if op.operands else None
    expect(isinstance(wg, WorkgroupType), op, "operand must be a workgroup")
    t = op.result.type
    expect(isinstance(t, BufferType), op, "result must be a !cnm.buffer")
    expect(t.wg == wg.dims, op, "buffer workgroup shape must match its workgroup")
    expect(0 <= t.level <= len(wg.dims), op, "level out of range")
    expect(op.attrs.get("level", t.level) == t.level, op, "level attribute disagrees with type")


def _map_attr(op) -> AffineMap:
    text = op.attrs.get("map")
    expect(isinstance(text, str), op, "needs a 'map' string attribute")
    try:
        return AffineMap.parse(text)
    except MapError as e:
        raise VerifyError(f"{op.name}: {e}") from None


def _v_scatter(op):
    expect(len(op.operands) == 2 and not op.results, op, "expects (host tensor, buffer) and no results")
    host, buf = op.operands[0].type, op.operands[1].type
    expect(isinstance(host, TensorType) and isinstance(buf, BufferType), op, "expects (tensor, !cnm.buffer)")
    expect(host.elem == buf.elem, op, "element kinds differ")
    check_map(op, _map_attr(op), buf, host, "scatter")


def _v_gather(op):
    expect(len(op.operands) == 1, op, "expects one buffer operand")
    buf, host = op.operands[0].type, op.result.type
    expect(isinstance(buf, BufferType) and isinstance(host, TensorType), op, "expects !cnm.buffer -> tensor")
    expect(host.elem == buf.elem, op, "element kinds differ")
    check_map(op, _map_attr(op), buf, host, "gather")


def launch_parts(op: Operation):
    n_in = op.attrs.get("num_ins", 0)
    bufs = op.operands[1:]
    return op.operands[0], list(bufs[:n_in]), list(bufs[n_in:])


def _v_launch(op):
    wg = op.operands[0] if op.operands else None
    expect(wg is not None and isinstance(wg.type, WorkgroupType), op, "first operand must be a workgroup")
    _, ins, outs = launch_parts(op)
    expect(0 <= op.attrs.get("num_ins", -1) <= len(op.operands) - 1, op, "bad 'num_ins'")
    for v in ins + outs:
        expect(isinstance(v.type, BufferType), op, "launch operands after the workgroup must be buffers")
        owner = v.owner
        on_path = (isinstance(owner, Operation) and owner.name == "cnm.alloc_buffer"
                   and owner.operands[0] is wg)
        expect(on_path, op, "buffer is not on the leaf's root path of this workgroup")
    for v in outs:
        expect(v.type.level == len(wg.type.dims), op, "output buffers must live at the leaf level")
    expect([r.type for r in op.results] == [TOKEN], op, "result must be one !cnm.token")
    expect(len(op.regions) == 1, op, "needs a body region")
    body = op.regions[0]
    want = [INDEX] * len(wg.type.dims) + [v.type.view_type for v in ins + outs]
    expect([a.type for a in body.args] == want, op, "region arguments must be leaf coordinates then buffer views")
    term = body.terminator
    expect(term is not None and term.name == "yield", op, "body must end with yield")
    expect([v.type for v in term.operands] == [v.type.view_type for v in outs], op,
           "body must yield one value per output buffer")
    for inner in body.walk():
        expect(inner.dialect in ("", "cinm"), op, f"{inner.name} is not allowed in a launch body")
        for v in inner.operands:
            if not defined_in(v, body):
                raise VerifyError(
                    "cnm.launch: unconstrained access: the body uses a value defined outside the launch; "
                    "host data must reach leaves through scatter"
                )


def _v_wait(op):
    expect(len(op.operands) == 2, op, "expects (workgroup, token)")
    wg, tok = op.operands
    expect(isinstance(wg.type, WorkgroupType) and tok.type == TOKEN, op, "expects (workgroup, token)")
    owner = tok.owner
    expect(isinstance(owner, Operation) and owner.name == "cnm.launch" and owner.operands[0] is wg, op,
           "token must come from a launch on the same workgroup")


register_op("cnm.allocate", _v_allocate)
register_op("cnm.alloc_buffer", _v_alloc_buffer)
register_op("cnm.scatter", _v_scatter, pure=False)
register_op("cnm.gather", _v_gather)
register_op("cnm.launch", _v_launch, pure=False)
register_op("cnm.wait", _v_wait, pure=False)


@register_function_check
def _gather_after_wait(f: Function) -> None:
    pending: dict = {}

    def visit(region):
        for op in region.ops:
            if op.name == "cnm.launch":
                _, _, outs = launch_parts(op)
                for b in outs:
                    pending[b] = op.results[0]
            elif op.name == "cnm.wait":
                tok = op.operands[1]
                for b in [b for b, t in pending.items() if t is tok]:
                    del pending[b]
            elif op.name == "cnm.gather" and op.operands[0] in pending:
                raise VerifyError("cnm.gather: gather before wait")
            else:
                for r in op.regions:
                    visit(r)

    visit(f.body)


# ---------------------------------------------------------------- runtime


@dataclass
class Workgroup:
    dims: tuple


@handler("cnm.allocate")
def _allocate(interp, op, vals, env):
    return [Workgroup(tuple(op.attrs["dims"]))]


@handler("cnm.alloc_buffer")
def _alloc_buffer(interp, op, vals, env):
    t = op.result.type
    return [np.zeros(domain(t), dtype=np.int32)]


@handler("cnm.scatter")
def _scatter(interp, op, vals, env):
    host, buf = vals
    bt = op.operands[1].type
    amap = AffineMap.parse(op.attrs["map"])
    coords = domain_coords(bt)
    if _empty(bt):
        return []
    idx = amap.evaluate(coords)
    buf[tuple(coords)] = host[tuple(idx)]
    return []


@handler("cnm.gather")
def _gather(interp, op, vals, env):
    bt = op.operands[0].type
    out = np.zeros(op.result.type.shape, dtype=np.int32)
    amap = AffineMap.parse(op.attrs["map"])
    coords = domain_coords(bt)
    if _empty(bt):
        return [out]
    idx = amap.evaluate(coords)
    out[tuple(idx)] = vals[0][tuple(coords)]
    return [out]


@handler("cnm.launch")
def _launch(interp, op, vals, env):
    wg = vals[0]
    _, ins, outs = launch_parts(op)
    bufs = vals[1:]
    types = [v.type for v in ins + outs]
    body = op.regions[0]
    for leaf in interp.ordered(np.ndindex(*wg.dims)):
        views = [np.array(b[leaf[: t.level]]) for b, t in zip(bufs, types)]
        res = interp.run_region(body, list(leaf) + views)
        for b, t, r in zip(bufs[len(ins):], types[len(ins):], res):
            r = np.asarray(r)
            if r.shape != t.shape:
                raise ExecutionError("cnm.launch: yielded view has the wrong shape")
            b[leaf[: t.level]] = r
    return [object()]


@handler("cnm.wait")
def _wait(interp, op, vals, env):
    return []
