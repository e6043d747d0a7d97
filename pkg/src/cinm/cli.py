"""Command-line drivers.

``cinm-opt`` lowers one module (a file or a bundled benchmark name), prints
it, and optionally simulates it. ``cinm-bench`` runs the bundled corpus
across the standard configuration grid.

Exit codes: 0 ok, 1 parse/verify/usage error, 2 result mismatch against the
cinm interpreter, 3 device resource exhausted.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import corpus
from . import pipelines as P
from .ir import CapacityError, IRError, PassFailure, ResourceError, parse_module, print_module, run_pipeline
from .ir.passes import parse_dims

EXIT_OK, EXIT_ERROR, EXIT_MISMATCH, EXIT_RESOURCE = 0, 1, 2, 3
METRIC_KEYS = ("benchmark", "config", "device", "counters", "checksum")


def _exit_code(err: Exception) -> int:
    cause = err.cause if isinstance(err, PassFailure) else err
    return EXIT_RESOURCE if isinstance(cause, (CapacityError, ResourceError)) else EXIT_ERROR


def metrics_line(benchmark, config, device, counters, checksum) -> str:
    row = dict(zip(METRIC_KEYS, (benchmark, config, device, _flatten(counters), checksum)))
    return json.dumps(row)


def _flatten(counters: dict) -> dict:
    """``{"upmem": {"launches": 1}}`` -> ``{"upmem.launches": 1}``; single-device
    runs drop the prefix."""
    if len(counters) == 1:
        (inner,) = counters.values()
        return {k: int(v) for k, v in inner.items()}
    return {f"{dev}.{k}": int(v) for dev, c in sorted(counters.items()) for k, v in c.items()}


def _device_of(target: str, counters: dict) -> str:
    if target != "auto":
        return target
    devs = [d for d in counters if d != "cim"]
    return "+".join(sorted(devs)) or "host"


def _read_input(src: str):
    """A path, ``-`` for stdin, or the name of a bundled benchmark."""
    if src == "-":
        return "stdin", sys.stdin.read(), None
    p = Path(src)
    if p.is_file():
        text = p.read_text()
        wg = corpus.parse_header(text).get("wg")
        return p.stem, text, parse_dims(wg) if wg else None
    if src in corpus.names():
        b = corpus.load(src)
        return b.name, b.text, b.wg
    raise FileNotFoundError(f"no such file or benchmark: {src}")


def _options(args, wg_default=None) -> P.Options:
    o = P.Options()
    if args.wg or wg_default:
        o.wg = parse_dims(args.wg) if args.wg else wg_default
    if args.xbar:
        o.xbar = parse_dims(args.xbar)
    if args.pool:
        o.pool = args.pool
    o.tasklets = args.tasklets
    return o


def opt_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cinm-opt", description="Lower, print and simulate cinm modules.")
    ap.add_argument("input", help="a .cinm file, '-' for stdin, or a bundled benchmark name")
    ap.add_argument("--emit", choices=P.LEVELS, help="lowering level to print (default: the target's device level)")
    ap.add_argument("--passes", help="explicit pass pipeline, e.g. 'cinm-to-cnm{wg=2x8},cnm-to-upmem'")
    ap.add_argument("--run", action="store_true", help="simulate the lowered module on seeded inputs")
    ap.add_argument("--check", action="store_true", help="compare the simulated result with the cinm interpreter")
    ap.add_argument("--target", choices=P.TARGETS,
                    help="device for every op (default: chosen per op, or implied by --emit)")
    ap.add_argument("--wg", help="workgroup shape, e.g. 4x16")
    ap.add_argument("--xbar", help="crossbar rows x cols, e.g. 128x128")
    ap.add_argument("--pool", type=int, help="number of crossbars")
    ap.add_argument("--tasklets", type=int, help="tasklets per DPU")
    ap.add_argument("--metrics", help="write the metrics JSON line to this file (default: stderr)")
    ap.add_argument("--seed", type=int, default=0, help="seed for generated inputs")
    ap.add_argument("--trace", action="store_true", help="print the pass trace to stderr")
    ap.add_argument("--quiet", "-q", action="store_true", help="do not print the module")
    return ap


def _default_level(target: str) -> str:
    return {"upmem": "upmem", "memristor": "memristor", "host": "cinm"}.get(target, "memristor")


def _implied_target(emit) -> str:
    """An emit level below cinm names its device; otherwise choose per op."""
    return {"cnm": "upmem", "upmem": "upmem", "cim": "memristor", "memristor": "memristor"}.get(emit, "auto")


def opt_main(argv=None) -> int:
    args = opt_parser().parse_args(argv)
    if args.check:
        args.run = True
    if args.target is None:
        args.target = _implied_target(args.emit)
    try:
        name, text, wg = _read_input(args.input)
        m = parse_module(text)
        o = _options(args, wg)
        if args.passes:
            passes = args.passes
        else:
            passes = P.pipeline_for(args.emit or _default_level(args.target), args.target, o)
        out, trace = run_pipeline(m, passes)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except IRError as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)

    if args.trace:
        for t in trace:
            print(f"{t.name}: {t.ops_before} -> {t.ops_after} ops", file=sys.stderr)
    if not args.quiet:
        sys.stdout.write(print_module(out))
    if not args.run:
        return EXIT_OK

    inputs = P.random_args(m, args.seed)
    try:
        res = P.simulate(out, inputs, pool=o.pool)
    except IRError as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)
    line = metrics_line(name, args.target, _device_of(args.target, res.counters), res.counters,
                        P.checksum(res.outputs))
    if args.metrics:
        Path(args.metrics).write_text(line + "\n")
    else:
        print(line, file=sys.stderr)
    if args.check:
        want = P.reference(m, inputs)
        if P.checksum(want) != P.checksum(res.outputs):
            print(f"error: {name}: simulated result differs from the cinm interpreter", file=sys.stderr)
            return EXIT_MISMATCH
    return EXIT_OK


# ---------------------------------------------------------------- bench


def run_benchmark(b: corpus.Benchmark, config: str, seed: int = 0, check: bool = True):
    """Lower and simulate one benchmark; returns (metrics line, printed IR)."""
    o = P.Options(wg=b.wg or P.Options().wg)
    device, passes = P.config_pipeline(config, o)
    m = b.module()
    out, _ = run_pipeline(m, passes)
    inputs = P.random_args(m, seed)
    res = P.simulate(out, inputs, pool=o.pool)
    got = P.checksum(res.outputs)
    if check and got != P.checksum(P.reference(m, inputs)):
        raise AssertionError("simulated result differs from the cinm interpreter")
    return metrics_line(b.name, config, device, {device: res.counters[device]}, got), print_module(out)


def bench_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cinm-bench", description="Run the bundled corpus over the configuration grid.")
    ap.add_argument("--bench", nargs="*", help="benchmark names (default: all)")
    ap.add_argument("--configs", nargs="*", choices=list(P.CONFIGS), help="configurations (default: all)")
    ap.add_argument("--metrics", default="-", help="JSON-lines output ('-' for stdout)")
    ap.add_argument("--csv", help="also write a flat CSV table here")
    ap.add_argument("--ir-dir", help="write each lowered module to DIR/<bench>.<config>.cinm")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-check", action="store_true", help="skip the interpreter comparison")
    return ap


def bench_main(argv=None) -> int:
    args = bench_parser().parse_args(argv)
    try:
        benches = [corpus.load(n) for n in args.bench] if args.bench else corpus.load_all()
    except KeyError as e:
        print(f"error: {e.args[0]}", file=sys.stderr)
        return EXIT_ERROR
    configs = args.configs or list(P.CONFIGS)
    ir_dir = Path(args.ir_dir) if args.ir_dir else None
    if ir_dir:
        ir_dir.mkdir(parents=True, exist_ok=True)

    lines, rows, failures = [], [], 0
    for b in benches:
        for config in configs:
            if P.CONFIGS[config][0] not in b.devices:
                continue
            try:
                line, ir = run_benchmark(b, config, args.seed, not args.no_check)
            except (IRError, AssertionError) as e:
                failures += 1
                print(f"FAIL {b.name} {config}: {e}", file=sys.stderr)
                rows.append({"benchmark": b.name, "config": config, "status": f"error: {e}"})
                continue
            lines.append(line)
            row = json.loads(line)
            rows.append({"benchmark": b.name, "config": config, "status": "ok", **row["counters"]})
            if ir_dir:
                (ir_dir / f"{b.name}.{config}.cinm").write_text(ir)

    body = "".join(ln + "\n" for ln in lines)
    if args.metrics == "-":
        sys.stdout.write(body)
    else:
        Path(args.metrics).write_text(body)
    if args.csv:
        Path(args.csv).write_text(_csv(rows))
    return EXIT_ERROR if failures else EXIT_OK


def _csv(rows) -> str:
    cols = ["benchmark", "config", "status"]
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


if __name__ == "__main__":
    sys.exit(opt_main())
