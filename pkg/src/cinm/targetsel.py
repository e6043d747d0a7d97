"""Device selection for cinm ops.

Backends register a cost estimator per device; ``cinm-select-targets``
annotates every cinm op with the cheapest device that supports it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .dialects import cinm as C
from .ir import IRError, IrModule, Operation, register_pass

W_WRITE = 64
W_LAUNCH = 1024
UNSUPPORTED_COST = float("inf")
HOST = "host"


@dataclass(frozen=True)
class CostEstimate:
    device: str
    bytes_moved: int = 0
    device_writes: int = 0
    launches: int = 0
    supported: bool = True

    @property
    def scalar_cost(self):
        if not self.supported:
            return UNSUPPORTED_COST
        return self.bytes_moved + W_WRITE * self.device_writes + W_LAUNCH * self.launches

    def __add__(self, other: "CostEstimate") -> "CostEstimate":
        return CostEstimate(self.device, self.bytes_moved + other.bytes_moved,
                            self.device_writes + other.device_writes, self.launches + other.launches,
                            self.supported and other.supported)


def unsupported(device: str) -> CostEstimate:
    return CostEstimate(device, supported=False)


Estimator = Callable[[Operation, dict], CostEstimate]


@dataclass(frozen=True)
class Device:
    name: str
    paradigm: str  # "cim" | "cnm"
    estimator: Estimator


class CostModelRegistry:
    def __init__(self):
        self.devices: dict[str, Device] = {}

    def register(self, name: str, paradigm: str, estimator: Estimator) -> None:
        if name in self.devices or name == HOST:
            raise IRError(f"cost model for device '{name}' already registered")
        if paradigm not in ("cim", "cnm"):
            raise IRError(f"device '{name}': paradigm must be cim or cnm")
        self.devices[name] = Device(name, paradigm, estimator)

    def ordered(self) -> list[Device]:
        """Tie-break order: cim devices first, then by name."""
        return sorted(self.devices.values(), key=lambda d: (d.paradigm != "cim", d.name))

    def estimate(self, op: Operation, device: str, spec: dict | None = None) -> CostEstimate:
        try:
            dev = self.devices[device]
        except KeyError:
            raise IRError(f"no cost model registered for device '{device}'") from None
        kind = C.kind_of(op)
        staged = op.dialect == "cinm" and op.mnemonic in C.STAGING
        if not staged and (kind is None or not C.supported(kind, dev.paradigm)):
            return unsupported(device)
        return dev.estimator(op, spec or {})

    def choose(self, op: Operation, specs: dict | None = None) -> tuple[str, list[CostEstimate]]:
        specs = specs or {}
        ests = [self.estimate(op, d.name, specs.get(d.name)) for d in self.ordered()]
        best = None
        for e in ests:
            if e.supported and (best is None or e.scalar_cost < best.scalar_cost):
                best = e
        return (best.device if best else HOST), ests


REGISTRY = CostModelRegistry()


def register_cost_model(name: str, paradigm: str):
    def deco(fn: Estimator) -> Estimator:
        REGISTRY.register(name, paradigm, fn)
        return fn

    return deco


def estimate(op: Operation, device: str, spec: dict | None = None) -> CostEstimate:
    return REGISTRY.estimate(op, device, spec)


def select_targets(m: IrModule, registry: CostModelRegistry = REGISTRY, specs: dict | None = None) -> IrModule:
    for op in list(m.walk()):
        if op.dialect == "cinm" and "target" not in op.attrs and not _nested(op):
            op.attrs["target"] = registry.choose(op, specs)[0]
    return m


def force_target(m: IrModule, device: str) -> IrModule:
    """Annotate every top-level cinm op with ``device`` (the CLI override)."""
    for op in m.walk():
        if op.dialect == "cinm" and not _nested(op):
            op.attrs["target"] = device
    return m


def _nested(op: Operation) -> bool:
    region = op.parent
    while region is not None and region.parent_op is not None:
        if region.parent_op.dialect in ("cnm", "upmem", "cim"):
            return True
        region = region.parent_op.parent
    return False


def target_paradigm(op: Operation) -> str | None:
    """Paradigm of the device an op was assigned to (None if unassigned)."""
    t = op.attrs.get("target")
    if t is None or t == HOST:
        return t
    try:
        return REGISTRY.devices[t].paradigm
    except KeyError:
        raise IRError(f"{op.name}: unknown target '{t}'") from None


@register_pass("cinm-select-targets")
def select_targets_pass(m: IrModule) -> IrModule:
    return select_targets(m)
