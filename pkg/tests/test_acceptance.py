"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; ``conftest.py`` prints them at the end
of the session, and ``python tests/test_acceptance.py`` runs just this file.
"""

import functools
import time
from math import ceil

import numpy as np
import pytest
from hypothesis import given, settings

import oracles
import test_cim
import test_cnm
import test_memristor
import test_rewrites
import test_upmem
import test_xform
from cinm import corpus
from cinm import pipelines as P
from cinm.cli import bench_main
from cinm.dialects.cinm import STAGING, SUPPORT, CinmOpKind, kind_of
from cinm.ir import CapacityError, PassFailure, VerifyError, parse_module, run_pipeline
from cinm.rewrites import rewrite_contraction_to_gemm
from cinm.targetsel import HOST, REGISTRY, estimate, select_targets
from helpers import bits, rand, run, single_op_module, t

RESULTS = {}
ALL_BENCHMARKS = ["va", "mv", "mm", "2mm", "3mm", "conv", "contrl", "contrs1", "contrs2", "mlp", "reduce",
                  "scan", "topk", "histogram", "sel", "ts"]


def criterion(label):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            RESULTS[label] = "FAIL"
            fn(*args, **kwargs)
            RESULTS[label] = "PASS"

        return wrapper

    return deco


@functools.lru_cache(maxsize=None)
def matrix():
    """Run every benchmark on every applicable configuration once.

    Returns ({(bench, config): (matches, counters)}, seconds).
    """
    start = time.perf_counter()
    out = {}
    for b in corpus.load_all():
        m = b.module()
        args = P.random_args(m, 0)
        want = [v.data.tolist() for v in P.reference(m, args)]
        for config, (device, _) in P.CONFIGS.items():
            if device not in b.devices:
                continue
            o = P.Options(wg=b.wg or P.Options().wg)
            _, passes = P.config_pipeline(config, o)
            lowered, _ = run_pipeline(m, passes)
            res = P.simulate(lowered, args, pool=o.pool)
            out[b.name, config] = ([v.data.tolist() for v in res.outputs] == want, res.counters[device])
    return out, time.perf_counter() - start


# ---------------------------------------------------------------- 1


@criterion("1 oracle equivalence over the full benchmark x path matrix")
def test_oracle_equivalence_full_matrix():
    assert sorted(corpus.names()) == sorted(ALL_BENCHMARKS)
    results, seconds = matrix()
    for b in corpus.load_all():
        want = {c for c, (d, _) in P.CONFIGS.items() if d in b.devices}
        assert {c for (n, c) in results if n == b.name} == want
        # every kernel offloadable to crossbars runs on both backends
        if b.name not in ("va", "reduce", "scan", "topk", "histogram", "sel"):
            assert set(b.devices) == {"upmem", "memristor"}, b.name
    bad = [k for k, (ok, _) in results.items() if not ok]
    assert not bad, f"mismatches: {bad}"
    assert seconds < 60, f"matrix took {seconds:.1f}s"


# ---------------------------------------------------------------- 2


# kernels whose crossbar gemms have more rows than the 128-row crossbar, so a
# programmed weight tile serves several row strips: mm (256 rows), conv
# (im2col gives 32*32 rows) and contrs2 (a*c = 1024 rows)
WRITE_REUSE = {"mm", "conv", "contrs2"}


@criterion("2 crossbar write-count law")
def test_write_count_law():
    m = single_op_module("gemm", [t(256, 256), t(256, 256)])
    rng = np.random.default_rng(0)
    args = [rand(rng, (256, 256)), rand(rng, (256, 256))]
    got = {}
    for name, passes in (("naive", "cinm-to-cim{xbar=128x128},cim-to-memristor"),
                         ("min", "cinm-to-cim{xbar=128x128},cim-min-writes,cim-to-memristor")):
        out, _ = run_pipeline(m, passes)
        res = P.simulate(out, args)
        assert [v.data.tolist() for v in res.outputs] == [oracles.gemm(args[0].tolist(), args[1].tolist())]
        got[name] = res.counters["memristor"]["crossbar_writes"]
    assert got == {"naive": 8, "min": 4}
    assert got["naive"] // got["min"] == ceil(256 / 128)
    op = next(o for o in m.walk() if o.name == "cinm.gemm")
    assert estimate(op, "memristor", {"xbar": (128, 128), "min_writes": False}).device_writes == 8
    assert estimate(op, "memristor", {"xbar": (128, 128)}).device_writes == 4

    results, _ = matrix()
    for b in corpus.load_all():
        if "memristor" not in b.devices:
            continue
        naive = results[b.name, "cim"][1]["crossbar_writes"]
        for config in ("cim-min-writes", "cim-opt"):
            opt = results[b.name, config][1]["crossbar_writes"]
            assert opt <= naive, b.name
            assert (opt < naive) == (b.name in WRITE_REUSE), b.name


# ---------------------------------------------------------------- 3


@criterion("3 WRAM-locality law")
def test_wram_locality_law():
    b = corpus.load("mm")
    assert b.wg == (16, 8)
    base, _ = run_pipeline(b.module(), "cinm-to-cnm{wg=16x8},cnm-to-upmem")
    (launch,) = [o for o in base.walk() if o.name == "upmem.launch"]
    assert launch.attrs["tiles"] == [2, 32, 32]
    results, _ = matrix()
    measured = {c: results["mm", c][1]["mram_wram_bytes"] for c in ("cinm-nd", "cinm-opt-nd")}
    total_b, a_b = test_upmem._gemm_traffic(256, 256, 256, (16, 8), (2, 32, 32), reuse=False)
    total_o, a_o = test_upmem._gemm_traffic(256, 256, 256, (16, 8), (2, 32, 32), reuse=True)
    assert (measured["cinm-nd"], measured["cinm-opt-nd"]) == (total_b, total_o)
    assert a_b == ceil(256 / 32) * a_o
    assert measured["cinm-nd"] - measured["cinm-opt-nd"] == a_b - a_o  # only the A stream changed

    for bench in corpus.names():
        if "upmem" not in corpus.load(bench).devices:
            continue
        nd, opt = results[bench, "cinm-nd"][1], results[bench, "cinm-opt-nd"][1]
        assert opt["mram_wram_bytes"] <= nd["mram_wram_bytes"], bench
        assert sum(opt.values()) <= sum(nd.values()), bench


# ---------------------------------------------------------------- 4


@criterion("4 tiling soundness, 500 randomized cases")
def test_tiling_soundness_500():
    seen = {"n": 0, "box": 0, "rect": 0, "divisible": 0, "ragged": 0}

    @settings(max_examples=500, deadline=None)
    @given(test_xform.tiling_cases())
    def check(case):
        kind, types, arrs, spec, attrs, seed = case
        test_xform.check_tiling_case(kind, types, arrs, spec, attrs, seed)
        seen["n"] += 1
        seen[spec.shape] += 1
        dims = arrs[0]
        even = all(d % s == 0 for d, s in zip(dims, spec.sizes))
        seen["divisible" if even else "ragged"] += 1

    check()
    assert seen["n"] >= 500
    assert min(seen.values()) > 0, seen


# ---------------------------------------------------------------- 5


@criterion("5 conv and contraction rewrite soundness")
def test_rewrite_soundness():
    rng = np.random.default_rng(5)
    for i in range(100):
        n, c, fo = (int(x) for x in rng.integers(1, 4, 3))
        h, w = (int(x) for x in rng.integers(1, 7, 2))
        kh, kw = min(int(rng.integers(1, 4)), h), min(int(rng.integers(1, 4)), w)
        m, x, f = test_rewrites.conv_case((n, h, w, c), (kh, kw, c, fo), seed=i)
        r, _ = run_pipeline(m, "conv-to-gemm")
        assert "cinm.conv2d" not in {o.name for o in r.walk()}
        assert run(r, [x, f]) == [oracles.conv2d(x.tolist(), f.tolist())]
    for name, (spec, sa, sb) in test_rewrites.CONTRACTIONS.items():
        for seed in range(5):
            rng = np.random.default_rng(seed)
            a, b = rand(rng, sa), rand(rng, sb)
            m = single_op_module("contract", [t(*sa), t(*sb)], spec=spec)
            r = rewrite_contraction_to_gemm(m.clone())
            assert run(r, [a, b]) == [oracles.einsum(spec, a.tolist(), b.tolist())], name


# ---------------------------------------------------------------- 6


def _diagnostic(fn):
    try:
        fn()
    except (VerifyError, PassFailure) as e:
        return type(e.cause if isinstance(e, PassFailure) else e), str(e.cause if isinstance(e, PassFailure) else e)
    raise AssertionError("no diagnostic")


def _capture_host_value():
    text = test_cnm.VA.replace("%s = cinm.add %x, %y", "%s = cinm.add %x, %a")
    text = text.replace("%a: tensor<1024xi32>", "%a: tensor<16xi32>").replace(
        'cnm.scatter %a, %ba {map = "(l0, l1, e0) -> ((l0 * 16 + l1) * 16 + e0)"}',
        'cnm.scatter %b, %ba {map = "(l0, l1, e0) -> ((l0 * 16 + l1) * 16 + e0)"}')
    return text


CONSTRAINTS = {
    "a": (lambda: parse_module(_capture_host_value()),
          "cnm.launch: unconstrained access: the body uses a value defined outside the launch; "
          "host data must reach leaves through scatter"),
    "b": (lambda: parse_module(test_cnm.VA.replace(
        'cnm.scatter %b, %bb {map = "(l0, l1, e0) -> ((l0 * 16 + l1) * 16 + e0)"}',
        'cnm.scatter %b, %bb {map = "(l0, l1, e0) -> (l1 * 16 + e0)"}')),
        "cnm.scatter: overlapping scatter"),
    "c": (lambda: parse_module(test_cnm.VA.replace("  cnm.wait %wg, %tok\n", "")), "cnm.gather: gather before wait"),
    "d": (lambda: parse_module(test_memristor.READ_FIRST), "memristor: crossbar read before write"),
    "e-crossbar": (lambda: parse_module(test_cim.GEMV.format(m=129)),
                   "cim.execute: tile 129x128 exceeds crossbar 128x128"),
    "e-wram": (lambda: run_pipeline(single_op_module("max", [t(16 * 32768)]), "cinm-to-cnm{wg=1x16},cnm-to-upmem"),
               "WRAM overflow: requires 131080 bytes, available 4096 bytes"),
}


@criterion("6 constraint enforcement (a)-(e)")
def test_constraint_enforcement():
    for case, (fn, message) in CONSTRAINTS.items():
        kind, text = _diagnostic(fn)
        assert text == message, case
        if case.startswith("e"):
            assert issubclass(kind, CapacityError), case
    # each fixture minus its defect is accepted
    parse_module(test_cnm.VA)
    parse_module(test_cim.GEMV.format(m=128))


# ---------------------------------------------------------------- 7


@criterion("7 estimator fidelity and support compliance")
def test_estimator_fidelity():
    results, _ = matrix()
    for b in corpus.load_all():
        m = b.module()
        ops = [o for o in m.function("main").body.ops if o.dialect == "cinm"]
        for config, (device, over) in P.CONFIGS.items():
            if device not in b.devices:
                continue
            if device == "upmem":
                spec = {"wg": b.wg or P.Options().wg, "opt": over["wram_opt"]}
            else:
                spec = {"xbar": P.Options().xbar, "min_writes": over["min_writes"]}
            ests = [estimate(o, device, spec) for o in ops]
            live = [e for e in ests if e.supported]
            got = results[b.name, config][1]
            if device == "upmem":
                assert len(live) == len(ops), b.name  # everything in an upmem benchmark runs there
                moved = got["host_to_mram_bytes"] + got["mram_to_host_bytes"] + got["mram_wram_bytes"]
                assert (sum(e.bytes_moved for e in live), sum(e.launches for e in live)) == (
                    moved, got["launches"]), (b.name, config)
            else:
                moved = got["host_to_device_bytes"] + got["device_to_host_bytes"]
                assert (sum(e.bytes_moved for e in live), sum(e.device_writes for e in live),
                        sum(e.launches for e in live)) == (moved, got["crossbar_writes"], got["crossbar_reads"]), (
                    b.name, config)

        picked = select_targets(b.module())
        for o in picked.walk():
            if o.dialect != "cinm" or "target" not in o.attrs:
                continue
            target = o.attrs["target"]
            if target != HOST:
                paradigm = REGISTRY.devices[target].paradigm
                # conv2d and contract are rewritten to gemm before lowering
                kind = CinmOpKind.gemm if o.mnemonic in STAGING else kind_of(o)
                assert getattr(SUPPORT[kind], paradigm), (b.name, o.name, target)

    only_cnm = [("scan", [t(64)], {"op": "sum"}), ("reduce", [t(64)], {"op": "sum"}), ("topk", [t(64)], {"k": 3}),
                ("transpose", [t(8, 8)], {}), ("histogram", [t(64)], {"bins": 4}),
                ("majority", [bits(64)], {})]
    for kind, types, attrs in only_cnm:
        (o,) = [x for x in select_targets(single_op_module(kind, types, **attrs)).walk() if x.dialect == "cinm"]
        assert o.attrs["target"] == "upmem", kind
    (o,) = [x for x in select_targets(single_op_module("popcount", [bits(64)])).walk() if x.dialect == "cinm"]
    assert o.attrs["target"] == "memristor"


# ---------------------------------------------------------------- 8


@criterion("8 determinism of repeated bench runs")
def test_bench_determinism(tmp_path):
    files = []
    for run_id in ("one", "two"):
        d = tmp_path / run_id
        d.mkdir()
        argv = ["--seed", "0", "--metrics", str(d / "metrics.jsonl"), "--csv", str(d / "table.csv"),
                "--ir-dir", str(d / "ir")]
        assert bench_main(argv) == 0
        files.append({p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    assert files[0] == files[1]
    assert len(files[0]) == 2 + len(matrix()[0])


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-W", "ignore::pytest.PytestAssertRewriteWarning"]))
