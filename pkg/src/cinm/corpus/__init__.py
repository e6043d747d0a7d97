"""Benchmark kernels shipped with the package.

Each ``<name>.cinm`` file starts with ``//`` header lines: a description,
``devices:`` (the devices the kernel makes sense on) and an optional
``wg:`` workgroup override.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from ..ir import IrModule, parse_module


@dataclass(frozen=True)
class Benchmark:
    name: str
    text: str
    devices: tuple
    wg: tuple | None = None

    def module(self) -> IrModule:
        return parse_module(self.text)


def parse_header(text: str) -> dict:
    meta = {}
    for line in text.splitlines():
        if not line.startswith("//"):
            break
        key, sep, val = line[2:].partition(":")
        if sep:
            meta[key.strip()] = val.strip()
    return meta


def _load(name: str, text: str) -> Benchmark:
    meta = parse_header(text)
    wg = tuple(int(x) for x in meta["wg"].split("x")) if "wg" in meta else None
    return Benchmark(name, text, tuple(meta.get("devices", "").split()), wg)


def names() -> list[str]:
    files = resources.files(__name__).iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".cinm"))


def load(name: str) -> Benchmark:
    f = resources.files(__name__) / f"{name}.cinm"
    if not f.is_file():
        raise KeyError(f"unknown benchmark '{name}' (choose from {', '.join(names())})")
    return _load(name, f.read_text())


def load_all() -> list[Benchmark]:
    return [load(n) for n in names()]
