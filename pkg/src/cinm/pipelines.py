"""Canned end-to-end flows and the combined device simulator."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .backends import memristor, upmem
from .dialects import cinm as C
from .interp import Interpreter, TensorValue, run_function
from .ir import IrModule

LEVELS = ("cinm", "cnm", "cim", "upmem", "memristor")
TARGETS = ("auto", "upmem", "memristor", "host")


@dataclass
class Options:
    wg: tuple = (4, 16)
    xbar: tuple = (128, 128)
    pool: int = 4
    tasklets: int | None = None
    wram_opt: bool = True
    min_writes: bool = True
    parallel: bool = True


# bench configurations: name -> (device, option overrides)
CONFIGS = {
    "cinm-nd": ("upmem", {"wram_opt": False}),
    "cinm-opt-nd": ("upmem", {"wram_opt": True}),
    "cim": ("memristor", {"min_writes": False, "parallel": False}),
    "cim-min-writes": ("memristor", {"min_writes": True, "parallel": False}),
    "cim-opt": ("memristor", {"min_writes": True, "parallel": True}),
}


def _dims(d) -> str:
    return "x".join(str(x) for x in d)


def cnm_passes(o: Options) -> list[str]:
    return [f"cinm-to-cnm{{wg={_dims(o.wg)}}}"]


def upmem_passes(o: Options) -> list[str]:
    opts = f"{{tasklets={o.tasklets}}}" if o.tasklets else ""
    return ["cnm-to-upmem" + opts] + (["upmem-wram-opt"] if o.wram_opt else [])


def cim_passes(o: Options) -> list[str]:
    out = [f"cinm-to-cim{{xbar={_dims(o.xbar)}}}"]
    if o.min_writes:
        out.append("cim-min-writes")
    if o.parallel:
        out.append(f"cim-parallel{{factor={o.pool}}}")
    return out


def memristor_passes(o: Options) -> list[str]:
    return [f"cim-to-memristor{{pool={o.pool}}}"]


def pipeline_for(level: str, target: str, o: Options) -> list[str]:
    """Passes that take a cinm module down to ``level`` for ``target``."""
    if level not in LEVELS:
        raise ValueError(f"unknown level '{level}' (choose from {', '.join(LEVELS)})")
    if target not in TARGETS:
        raise ValueError(f"unknown target '{target}' (choose from {', '.join(TARGETS)})")
    if level == "cinm" or target == "host":
        return ["cinm-select-targets"] if target == "auto" and level == "cinm" else []
    cnm_side = {"cnm": cnm_passes(o), "upmem": cnm_passes(o) + upmem_passes(o)}
    cim_side = {"cim": cim_passes(o), "memristor": cim_passes(o) + memristor_passes(o)}
    if target != "auto":
        side = cnm_side if target == "upmem" else cim_side
        if level not in side:
            raise ValueError(f"level '{level}' is not on the {target} path")
        return side[level]
    # auto: each op goes to its selected device; both chains run
    if level in ("cnm", "cim"):
        return ["cinm-select-targets"] + (cnm_side if level == "cnm" else cim_side)[level]
    return ["cinm-select-targets"] + cim_side["memristor"] + cnm_side["upmem"]


def config_pipeline(config: str, o: Options) -> tuple[str, list[str]]:
    device, overrides = CONFIGS[config]
    o = Options(**{**o.__dict__, **overrides})
    return device, pipeline_for(device, device, o)


@dataclass
class RunResult:
    outputs: list
    counters: dict = field(default_factory=dict)  # device -> {counter: int}


def simulate(m: IrModule, args, pool: int = 4, leaf_order: str = "forward", fn: str = "main") -> RunResult:
    """Run a module at any level; device runtimes report their counters."""
    interp = Interpreter(leaf_order=leaf_order, cim_pool=pool)
    outs = run_function(m.function(fn), args, interp)
    counters = {}
    if "upmem" in interp.runtimes:
        counters["upmem"] = upmem.runtime_of(interp).metrics.counters()
    if "cim.pool" in interp.runtimes:
        pool_rt = interp.runtimes["cim.pool"]
        counters["cim"] = {"executions": pool_rt.executions, "writes": pool_rt.writes, "peak": pool_rt.peak}
    if "memristor" in interp.runtimes:
        counters["memristor"] = memristor.runtime_of(interp).metrics().counters()
    return RunResult(outs, counters)


def reference(m: IrModule, args, fn: str = "main") -> list[TensorValue]:
    return C.interpret(m.function(fn), args)


def random_args(m: IrModule, seed: int, fn: str = "main") -> list[np.ndarray]:
    """Inputs for ``fn`` drawn from ``seed`` alone (small values, bits for i1)."""
    rng = np.random.default_rng(seed)
    out = []
    for t in m.function(fn).arg_types:
        if t.elem.value == "i1":
            out.append(rng.integers(0, 2, t.shape))
        else:
            out.append(rng.integers(-8, 9, t.shape))
    return out


def checksum(values) -> str:
    h = hashlib.sha256()
    for v in values:
        data = v.data if isinstance(v, TensorValue) else np.asarray(v)
        h.update(repr(tuple(data.shape)).encode())
        h.update(np.ascontiguousarray(data, dtype="<i4").tobytes())
    return "sha256:" + h.hexdigest()
