from math import ceil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinm import corpus
from cinm import pipelines as P
from cinm.dialects.cinm import kind_of, supported
from cinm.ir import IRError, parse_module, run_pipeline
from cinm.lowering.to_upmem import upmem_pipeline
from cinm.backends import upmem
from cinm.targetsel import (HOST, REGISTRY, W_LAUNCH, W_WRITE, CostEstimate, CostModelRegistry, estimate,
                            select_targets)
from helpers import bits, cnm_args, cnm_cases, run, single_op_module, t


def _op(m):
    (op,) = [o for o in m.walk() if o.dialect == "cinm"]
    return op


def _memristor_sim(m, xbar="4x4", min_writes=True):
    passes = [f"cinm-to-cim{{xbar={xbar}}}"] + (["cim-min-writes"] if min_writes else []) + ["cim-to-memristor"]
    out, _ = run_pipeline(m, ",".join(passes))
    args = cnm_args(m.function("main").arg_types, np.random.default_rng(0))
    res = P.simulate(out, args)
    assert [v.data.tolist() for v in res.outputs] == run(m, args)
    return res.counters["memristor"]


def test_gemm_256_memristor_estimate():
    op = _op(single_op_module("gemm", [t(256, 256), t(256, 256)]))
    est = estimate(op, "memristor", {"xbar": (128, 128)})
    # 2x2 weight tiles, each read by two row strips
    assert (est.device_writes, est.launches) == (4, 8)
    assert estimate(op, "memristor", {"xbar": (128, 128), "min_writes": False}).device_writes == 8
    assert est.bytes_moved == 4 * (4 * 128 * 128 + 8 * 128 * 128) + 4 * 8 * 128 * 128
    assert est.scalar_cost == est.bytes_moved + W_WRITE * 4 + W_LAUNCH * 8


def test_unsupported_pairs():
    pop = _op(single_op_module("popcount", [bits(64)]))
    assert not estimate(pop, "upmem").supported
    assert estimate(pop, "upmem").scalar_cost == float("inf")
    scan = _op(single_op_module("scan", [t(64)], op="sum"))
    assert not estimate(scan, "memristor").supported
    # elementwise add is cim-capable in principle but has no crossbar mapping
    add = _op(single_op_module("add", [t(64), t(64)]))
    assert not estimate(add, "memristor").supported


def test_va_64k_upmem_estimate_matches_simulator():
    n = 64 * 1024
    m = single_op_module("add", [t(n), t(n)])
    est = estimate(_op(m), "upmem")
    out, _ = run_pipeline(m, upmem_pipeline({}))
    rng = np.random.default_rng(0)
    _, met = upmem.simulate(out, [rng.integers(-9, 9, n), rng.integers(-9, 9, n)])
    assert est.bytes_moved == met.host_to_mram_bytes + met.mram_to_host_bytes + met.mram_wram_bytes
    assert est.bytes_moved == 6 * n * 4
    assert est.launches == met.launches == 1


def test_selection_follows_capability_and_cost():
    scan = single_op_module("scan", [t(512)], op="sum")
    gemm = single_op_module("gemm", [t(256, 256), t(256, 256)])
    pop = single_op_module("popcount", [bits(512)])
    assert _op(select_targets(scan)).attrs["target"] == "upmem"
    assert _op(select_targets(gemm)).attrs["target"] == "memristor"
    assert _op(select_targets(pop)).attrs["target"] == "memristor"


def test_nothing_supports_it_so_it_stays_on_the_host():
    reg = CostModelRegistry()
    reg.register("upmem", "cnm", lambda op, spec: CostEstimate("upmem", 1))
    pop = single_op_module("popcount", [bits(8)])
    assert reg.choose(_op(pop))[0] == HOST


def test_ties_prefer_cim_then_name():
    reg = CostModelRegistry()
    for name, paradigm in (("zeta", "cnm"), ("alpha", "cnm"), ("xb", "cim")):
        reg.register(name, paradigm, lambda op, spec, n=name: CostEstimate(n, 100))
    op = _op(single_op_module("gemm", [t(4, 4), t(4, 4)]))
    assert reg.choose(op)[0] == "xb"
    reg2 = CostModelRegistry()
    for name in ("zeta", "alpha"):
        reg2.register(name, "cnm", lambda op, spec, n=name: CostEstimate(n, 100))
    assert reg2.choose(op)[0] == "alpha"


def test_registry_rejects_duplicates_and_reserved_names():
    reg = CostModelRegistry()
    reg.register("d", "cnm", lambda op, spec: CostEstimate("d"))
    with pytest.raises(IRError, match="already registered"):
        reg.register("d", "cnm", lambda op, spec: CostEstimate("d"))
    with pytest.raises(IRError):
        reg.register(HOST, "cnm", lambda op, spec: CostEstimate(HOST))
    with pytest.raises(IRError, match="paradigm"):
        reg.register("e", "gpu", lambda op, spec: CostEstimate("e"))
    with pytest.raises(IRError, match="no cost model"):
        reg.estimate(_op(single_op_module("gemm", [t(2, 2), t(2, 2)])), "nope")


def test_explicit_target_is_kept():
    m = single_op_module("gemm", [t(256, 256), t(256, 256)])
    _op(m).attrs["target"] = "upmem"
    assert _op(select_targets(m)).attrs["target"] == "upmem"


# ---------------------------------------------------------------- properties


@st.composite
def any_op(draw):
    if draw(st.integers(0, 5)) == 0:
        n = draw(st.integers(1, 40))
        return "popcount", [bits(n)], {}
    kind, types, attrs, _ = draw(cnm_cases())
    return kind, types, attrs


@settings(max_examples=80, deadline=None)
@given(any_op())
def test_choice_is_supported_argmin(case):
    kind, types, attrs = case
    op = _op(single_op_module(kind, types, **attrs))
    choice, ests = REGISTRY.choose(op)
    live = [e for e in ests if e.supported]
    for e in live:
        assert supported(kind_of(op), REGISTRY.devices[e.device].paradigm)
    if not live:
        assert choice == HOST
        return
    best = min(e.scalar_cost for e in live)
    assert choice in REGISTRY.devices
    assert next(e for e in ests if e.device == choice).scalar_cost == best
    # independent recomputation of the weighted cost
    for e in live:
        assert e.scalar_cost == e.bytes_moved + W_WRITE * e.device_writes + W_LAUNCH * e.launches


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 20), st.booleans(), st.booleans())
def test_memristor_estimate_equals_simulation(m_, k, n, gemv, min_writes):
    types = [t(m_, k), t(k)] if gemv else [t(m_, k), t(k, n)]
    mod = single_op_module("gemv" if gemv else "gemm", types)
    est = estimate(_op(mod), "memristor", {"xbar": (4, 4), "min_writes": min_writes})
    c = _memristor_sim(mod, min_writes=min_writes)
    assert est.bytes_moved == c["host_to_device_bytes"] + c["device_to_host_bytes"]
    assert (est.device_writes, est.launches) == (c["crossbar_writes"], c["crossbar_reads"])
    if not gemv:
        reads = ceil(m_ / 4) * ceil(k / 4) * ceil(n / 4)
        assert est.launches == reads
        assert est.device_writes == (ceil(k / 4) * ceil(n / 4) if min_writes else reads)


@settings(max_examples=60, deadline=None)
@given(cnm_cases())
def test_upmem_estimate_equals_simulation(case):
    kind, types, attrs, wg = case
    mod = single_op_module(kind, types, **attrs)
    spec = {"wg": tuple(int(x) for x in wg.split("x"))}
    est = estimate(_op(mod), "upmem", spec)
    out, _ = run_pipeline(mod, upmem_pipeline(spec))
    _, met = upmem.simulate(out, cnm_args(types, np.random.default_rng(0)))
    assert est.bytes_moved == met.host_to_mram_bytes + met.mram_to_host_bytes + met.mram_wram_bytes
    assert est.launches == met.launches


# ---------------------------------------------------------------- corpus and mixed modules


@pytest.mark.parametrize("name", ["mm", "mv", "ts", "conv", "contrs2"])
def test_corpus_estimates_match_both_simulators(name):
    b = corpus.load(name)
    m = b.module()
    (op,) = [o for o in m.function("main").body.ops if o.dialect == "cinm"]
    args = P.random_args(m, 1)
    o = P.Options(wg=b.wg or (4, 16))
    for config in ("cinm-opt-nd", "cim-min-writes"):
        device, passes = P.config_pipeline(config, o)
        out, _ = run_pipeline(m, ",".join(passes))
        got = P.simulate(out, args).counters[device]
        if device == "upmem":
            est = estimate(op, "upmem", {"wg": o.wg})
            moved = got["host_to_mram_bytes"] + got["mram_to_host_bytes"] + got["mram_wram_bytes"]
            assert (est.bytes_moved, est.launches) == (moved, got["launches"])
        else:
            est = estimate(op, "memristor", {"xbar": o.xbar})
            moved = got["host_to_device_bytes"] + got["device_to_host_bytes"]
            assert (est.bytes_moved, est.device_writes, est.launches) == (
                moved, got["crossbar_writes"], got["crossbar_reads"])


MIXED = """func @main(%a: tensor<256x256xi32>, %b: tensor<256x256xi32>, %v: tensor<512xi32>, %p: tensor<64xi1>)
    -> (tensor<256x256xi32>, tensor<512xi32>, tensor<i32>, tensor<512xi32>) {
  %c = cinm.gemm %a, %b : tensor<256x256xi32>
  %s = cinm.scan %v {op = sum} : tensor<512xi32>
  %n = cinm.popcount %p : tensor<i32>
  %m = cinm.max %v : tensor<i32>
  %d = cinm.add %v, %s : tensor<512xi32>
  return %c, %s, %n, %d
}
"""


def test_mixed_module_splits_across_devices():
    m = parse_module(MIXED)
    picked, _ = run_pipeline(m, "cinm-select-targets")
    targets = [o.attrs["target"] for o in picked.walk() if o.dialect == "cinm"]
    assert targets[:3] == ["memristor", "upmem", "memristor"]
    out, _ = run_pipeline(m, ",".join(P.pipeline_for("upmem", "auto", P.Options())))
    top = out.function("main").body.ops
    assert not [o for o in top if o.dialect in ("cnm", "cim")]
    # whatever cinm stays at the top level is host work
    assert all(o.attrs.get("target", "host") == "host" for o in top if o.dialect == "cinm")
    args = P.random_args(m, 3)
    res = P.simulate(out, args)
    assert [v.data.tolist() for v in res.outputs] == run(m, args)
    assert set(res.counters) == {"upmem", "memristor"}
    assert res.counters["memristor"]["crossbar_reads"] > 0 and res.counters["upmem"]["launches"] > 0
