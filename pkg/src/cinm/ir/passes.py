"""Pass registry and pipeline runner."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

from .core import IRError, IrModule
from .verifier import verify_module

PassFn = Callable[..., IrModule]
PASSES: dict[str, PassFn] = {}


def register_pass(name: str):
    def deco(fn: PassFn) -> PassFn:
        if name in PASSES:
            raise ValueError(f"pass {name} registered twice")
        PASSES[name] = fn
        return fn

    return deco


class PassFailure(IRError):
    def __init__(self, pass_name: str, cause: Exception):
        super().__init__(f"pass '{pass_name}' failed: {cause}")
        self.pass_name = pass_name
        self.cause = cause


@dataclass
class PassSpec:
    name: str
    options: dict = field(default_factory=dict)

    def __str__(self) -> str:
        if not self.options:
            return self.name
        return self.name + "{" + ",".join(f"{k}={v}" for k, v in self.options.items()) + "}"


@dataclass
class PassPipeline:
    passes: list = field(default_factory=list)

    @classmethod
    def parse(cls, text: str) -> "PassPipeline":
        """Parse ``"a,b{x=1,y=2},c"``."""
        out = []
        for m in re.finditer(r"\s*([A-Za-z0-9_-]+)(?:\{([^}]*)\})?\s*(?:,|$)", text.strip()):
            if not m.group(1):
                continue
            opts = {}
            if m.group(2):
                for item in m.group(2).split(","):
                    if item.strip():
                        k, _, v = item.partition("=")
                        opts[k.strip()] = v.strip()
            out.append(PassSpec(m.group(1), opts))
        return cls(out)

    @classmethod
    def of(cls, *items) -> "PassPipeline":
        specs = []
        for it in items:
            if isinstance(it, PassSpec):
                specs.append(it)
            elif isinstance(it, tuple):
                specs.append(PassSpec(it[0], dict(it[1])))
            else:
                specs.extend(cls.parse(it).passes)
        return cls(specs)

    def __str__(self) -> str:
        return ",".join(str(p) for p in self.passes)


@dataclass(frozen=True)
class PassTraceEntry:
    name: str
    ops_before: int
    ops_after: int


def run_pipeline(m: IrModule, pipeline: PassPipeline | list | str) -> tuple[IrModule, list[PassTraceEntry]]:
    """Run ``pipeline`` on a copy of ``m``; the input module is never mutated."""
    if isinstance(pipeline, str):
        pipeline = PassPipeline.parse(pipeline)
    elif isinstance(pipeline, list):
        pipeline = PassPipeline.of(*pipeline)
    for spec in pipeline.passes:
        if spec.name not in PASSES:
            raise IRError(f"unknown pass {spec.name}")
    cur = m.clone()
    trace = []
    for spec in pipeline.passes:
        before = cur.op_count()
        try:
            cur = PASSES[spec.name](cur, **spec.options)
            verify_module(cur)
        except IRError as e:
            raise PassFailure(spec.name, e) from e
        trace.append(PassTraceEntry(spec.name, before, cur.op_count()))
    return cur, trace


def parse_dims(text, default=None) -> tuple:
    """``"4x16"`` -> (4, 16); tuples and lists pass through."""
    if text is None:
        return default
    if isinstance(text, (tuple, list)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).lower().split("x"))
