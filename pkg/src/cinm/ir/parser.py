"""Recursive-descent parser for the textual IR."""

from __future__ import annotations

import re

from .core import Function, IRError, IrModule, Operation, Region, Token, Value, is_registered
from .types import (
    INDEX,
    BufferType,
    ElementKind,
    MemRefType,
    OpaqueType,
    TensorType,
    Type,
    WorkgroupType,
)


class ParseError(IRError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*")
_VALUE = re.compile(r"%[A-Za-z0-9_.$-]+")
_INT = re.compile(r"-?[0-9]+")
_DIMS = re.compile(r"^((?:[0-9]+x)*)(i32|i1)$")


def _parse_tensor_body(body: str, line: int, col: int) -> tuple[tuple, ElementKind]:
    m = _DIMS.match(body.strip())
    if not m:
        raise ParseError(f"malformed shape '{body}'", line, col)
    dims = tuple(int(d) for d in m.group(1).split("x") if d)
    return dims, ElementKind(m.group(2))


def _parse_int_dims(body: str, line: int, col: int) -> tuple:
    body = body.strip()
    if not re.fullmatch(r"[0-9]+(x[0-9]+)*", body):
        raise ParseError(f"malformed dimensions '{body}'", line, col)
    return tuple(int(d) for d in body.split("x"))


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.scopes: list[dict[str, Value]] = []

    # -- lexical helpers
    def loc(self, pos: int | None = None) -> tuple[int, int]:
        pos = self.pos if pos is None else pos
        line = self.text.count("\n", 0, pos) + 1
        col = pos - (self.text.rfind("\n", 0, pos) + 1) + 1
        return line, col

    def error(self, message: str, pos: int | None = None) -> ParseError:
        return ParseError(message, *self.loc(pos))

    def skip(self) -> None:
        text = self.text
        while self.pos < len(text):
            c = text[self.pos]
            if c in " \t\r\n":
                self.pos += 1
            elif text.startswith("//", self.pos):
                nl = text.find("\n", self.pos)
                self.pos = len(text) if nl < 0 else nl + 1
            else:
                break

    def peek(self, s: str) -> bool:
        self.skip()
        return self.text.startswith(s, self.pos)

    def accept(self, s: str) -> bool:
        if self.peek(s):
            self.pos += len(s)
            return True
        return False

    def expect(self, s: str) -> None:
        if not self.accept(s):
            raise self.error(f"expected '{s}'")

    def at_end(self) -> bool:
        self.skip()
        return self.pos >= len(self.text)

    def match(self, pattern: re.Pattern) -> str | None:
        self.skip()
        m = pattern.match(self.text, self.pos)
        if not m:
            return None
        self.pos = m.end()
        return m.group(0)

    def ident(self) -> str:
        s = self.match(_IDENT)
        if s is None:
            raise self.error("expected identifier")
        return s

    def angle_body(self) -> str:
        self.expect("<")
        start = self.pos
        depth = 1
        while self.pos < len(self.text):
            c = self.text[self.pos]
            if c == "<":
                depth += 1
            elif c == ">":
                depth -= 1
                if depth == 0:
                    body = self.text[start : self.pos]
                    self.pos += 1
                    return body
            self.pos += 1
        raise self.error("unterminated '<'")

    # -- types
    def type(self) -> Type:
        self.skip()
        start = self.pos
        line, col = self.loc()
        if self.accept("!"):
            name = self.match(_IDENT)
            if name is None:
                raise self.error("expected type name after '!'")
            body = self.angle_body() if self.peek("<") else None
            if name == "cnm.workgroup":
                if body is None:
                    raise self.error("workgroup type needs dimensions", start)
                return WorkgroupType(_parse_int_dims(body, line, col))
            if name == "cnm.buffer":
                parts = [p.strip() for p in (body or "").split(",")]
                if len(parts) != 3:
                    raise self.error("buffer type is !cnm.buffer<shape, wg, level>", start)
                dims, elem = _parse_tensor_body(parts[0], line, col)
                return BufferType(dims, elem, _parse_int_dims(parts[1], line, col), int(parts[2]))
            params = _parse_int_dims(body, line, col) if body is not None else ()
            return OpaqueType(name, params)
        word = self.match(_IDENT)
        if word == "index":
            return INDEX
        if word == "tensor":
            dims, elem = _parse_tensor_body(self.angle_body(), line, col)
            return TensorType(dims, elem)
        if word == "memref":
            body = self.angle_body()
            space = ""
            if "," in body:
                body, space = (s.strip() for s in body.split(",", 1))
            dims, elem = _parse_tensor_body(body, line, col)
            return MemRefType(dims, elem, space)
        raise self.error("expected type", start)

    def type_list(self) -> list[Type]:
        if self.accept("("):
            if self.accept(")"):
                return []
            types = [self.type()]
            while self.accept(","):
                types.append(self.type())
            self.expect(")")
            return types
        types = [self.type()]
        while self.accept(","):
            types.append(self.type())
        return types

    # -- values
    def define(self, name: str, value: Value, pos: int) -> None:
        scope = self.scopes[-1]
        if name in scope:
            raise self.error(f"redefinition of value {name}", pos)
        scope[name] = value
        value.hint = name[1:]

    def lookup(self, name: str, pos: int) -> Value:
        for scope in reversed(self.scopes):
            if name in scope:
                return scope[name]
        raise self.error(f"use of undefined value {name}", pos)

    def value_ref(self) -> Value:
        self.skip()
        pos = self.pos
        name = self.match(_VALUE)
        if name is None:
            raise self.error("expected value")
        return self.lookup(name, pos)

    def typed_args(self) -> list[tuple[str, Type, int]]:
        out = []
        self.expect("(")
        if self.accept(")"):
            return out
        while True:
            self.skip()
            pos = self.pos
            name = self.match(_VALUE)
            if name is None:
                raise self.error("expected argument name")
            self.expect(":")
            out.append((name, self.type(), pos))
            if self.accept(")"):
                return out
            self.expect(",")

    # -- attributes
    def attr_value(self):
        self.skip()
        if self.accept("["):
            items = []
            if self.accept("]"):
                return items
            while True:
                v = self.match(_INT)
                if v is None:
                    raise self.error("expected integer in list")
                items.append(int(v))
                if self.accept("]"):
                    return items
                self.expect(",")
        if self.peek('"'):
            self.pos += 1
            out = []
            while self.pos < len(self.text) and self.text[self.pos] != '"':
                if self.text[self.pos] == "\\":
                    self.pos += 1
                out.append(self.text[self.pos])
                self.pos += 1
            self.expect('"')
            return "".join(out)
        v = self.match(_INT)
        if v is not None:
            return int(v)
        word = self.match(_IDENT)
        if word is None:
            raise self.error("expected attribute value")
        return Token(word)

    def attrs(self) -> dict:
        out = {}
        self.expect("{")
        while True:
            key = self.ident()
            self.expect("=")
            out[key] = self.attr_value()
            if self.accept("}"):
                return out
            self.expect(",")

    def attrs_follow(self) -> bool:
        self.skip()
        return re.match(r"\{\s*[A-Za-z_][A-Za-z0-9_]*\s*=", self.text[self.pos :]) is not None

    # -- structure
    def region(self) -> Region:
        self.expect("{")
        self.scopes.append({})
        arg_specs = []
        if self.accept("^"):
            arg_specs = self.typed_args()
        region = Region([t for _, t, _ in arg_specs])
        for (name, _, pos), v in zip(arg_specs, region.args):
            self.define(name, v, pos)
        while not self.accept("}"):
            if self.at_end():
                raise self.error("expected '}'")
            region.append(self.op())
        self.scopes.pop()
        return region

    def op(self) -> Operation:
        self.skip()
        result_names = []
        if self.peek("%"):
            while True:
                self.skip()
                pos = self.pos
                name = self.match(_VALUE)
                if name is None:
                    raise self.error("expected result name")
                result_names.append((name, pos))
                if not self.accept(","):
                    break
            self.expect("=")
        self.skip()
        name_pos = self.pos
        name = self.match(_IDENT)
        if name is None:
            raise self.error("expected operation name")
        if not is_registered(name):
            raise self.error(f"unknown operation {name}", name_pos)
        operands = []
        if re.match(r"[ \t]*%", self.text[self.pos : self.pos + 64]):
            operands.append(self.value_ref())
            while self.accept(","):
                operands.append(self.value_ref())
        attrs = self.attrs() if self.attrs_follow() else {}
        result_types = []
        if self.accept(":"):
            result_types = self.type_list()
        if len(result_types) != len(result_names):
            raise self.error(
                f"{name} declares {len(result_names)} results but {len(result_types)} result types",
                name_pos,
            )
        regions = []
        while self.peek("{"):
            regions.append(self.region())
        op = Operation(name, operands, result_types, attrs, regions)
        for (rname, pos), v in zip(result_names, op.results):
            self.define(rname, v, pos)
        return op

    def function(self) -> Function:
        if not self.accept("func"):
            raise self.error("expected 'func'")
        self.expect("@")
        fname = self.ident()
        self.scopes.append({})
        arg_specs = self.typed_args()
        result_types = []
        if self.accept("->"):
            result_types = self.type_list()
        body = Region([t for _, t, _ in arg_specs])
        for (name, _, pos), v in zip(arg_specs, body.args):
            self.define(name, v, pos)
        self.expect("{")
        while not self.accept("}"):
            if self.at_end():
                raise self.error("expected '}'")
            body.append(self.op())
        self.scopes.pop()
        return Function(fname, body, result_types)

    def module(self) -> IrModule:
        m = IrModule()
        self.skip()
        if self.at_end():
            raise self.error("expected 'func'")
        while not self.at_end():
            m.functions.append(self.function())
        return m


def parse_module(text: str, verify: bool = True) -> IrModule:
    """Parse textual IR; verifies the module unless ``verify`` is False."""
    m = _Parser(text).module()
    if verify:
        from .verifier import verify_module

        verify_module(m)
    return m
