"""Canonical textual printer."""

from __future__ import annotations

from .core import Function, IrModule, Operation, Region, Token, Value


def format_attr(value) -> str:
    if isinstance(value, Token):
        return str(value)
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(str(int(v)) for v in value) + "]"
    raise TypeError(f"unsupported attribute value {value!r}")


class _Printer:
    def __init__(self):
        self.names: dict[int, str] = {}
        self.lines: list[str] = []

    def name(self, v: Value) -> str:
        n = self.names.get(id(v))
        if n is None:
            n = f"%{len(self.names)}"
            self.names[id(v)] = n
        return n

    def ref(self, v: Value) -> str:
        n = self.names.get(id(v))
        if n is None:
            # Undefined value: verifier would reject; print something readable.
            return "%<undef>"
        return n

    def function(self, f: Function) -> None:
        self.names = {}
        args = ", ".join(f"{self.name(a)}: {a.type}" for a in f.args)
        head = f"func @{f.name}({args})"
        if f.result_types:
            head += " -> " + ", ".join(str(t) for t in f.result_types)
        self.lines.append(head + " {")
        self.region_body(f.body, 1)
        self.lines.append("}")

    def region_body(self, region: Region, depth: int) -> None:
        for op in region.ops:
            self.op(op, depth)

    def op(self, op: Operation, depth: int) -> None:
        pad = "  " * depth
        text = ""
        if op.results:
            text += ", ".join(self.name(r) for r in op.results) + " = "
        text += op.name
        if op.operands:
            text += " " + ", ".join(self.ref(v) for v in op.operands)
        if op.attrs:
            text += " {" + ", ".join(f"{k} = {format_attr(op.attrs[k])}" for k in sorted(op.attrs)) + "}"
        if op.results:
            text += " : " + ", ".join(str(r.type) for r in op.results)
        if not op.regions:
            self.lines.append(pad + text)
            return
        self.lines.append(pad + text + " {")
        for i, region in enumerate(op.regions):
            if i:
                self.lines.append(pad + "} {")
            if region.args:
                args = ", ".join(f"{self.name(a)}: {a.type}" for a in region.args)
                self.lines.append(pad + "  ^(" + args + ")")
            self.region_body(region, depth + 1)
        self.lines.append(pad + "}")


def print_module(m: IrModule) -> str:
    p = _Printer()
    for i, f in enumerate(m.functions):
        if i:
            p.lines.append("")
        p.function(f)
    return "\n".join(p.lines) + "\n"


def print_op(op: Operation) -> str:
    p = _Printer()
    p.op(op, 0)
    return "\n".join(p.lines)
