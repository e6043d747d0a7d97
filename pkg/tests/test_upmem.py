from math import ceil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cinm.backends.upmem import simulate
from cinm.dialects.cnm import domain, launch_parts
from cinm.interp import ExecutionError
from cinm.ir import CapacityError, PassFailure, VerifyError, parse_module, print_module, run_pipeline
from helpers import cnm_args, cnm_cases, rand, run, single_op_module, t

GRID = ("upmem.alloc_dpus {{dpus = 128, iram = 4096, mram = 67108864, ranks = 16, tasklets = 16, "
        "wg = [{n}], wram = 65536}} : !upmem.grid<{n}>")


def _program(body, n=1, size=4, out_size=4):
    return f"""func @main(%a: tensor<{size}xi32>) -> tensor<{out_size}xi32> {{
  %g = {GRID.format(n=n)}
  %h = upmem.mram_alloc %g {{base = 0, instances = 1, level = 0}} : !upmem.mram<{size}>
  %o = upmem.mram_alloc %g {{base = {size}, instances = 1, level = 0}} : !upmem.mram<{out_size}>
  upmem.copy_to_mram %g, %a, %h {{map = "(e0) -> (e0)", view = [{size}]}}
  upmem.launch %g, %h, %o {{iram = 4096, wram_slice = 4096}} {{
    ^(%m: !upmem.mram<{size}>, %out: !upmem.mram<{out_size}>)
{body}
    yield
  }}
  %r = upmem.copy_from_mram %g, %o {{map = "(e0) -> (e0)", view = [{out_size}]}} : tensor<{out_size}xi32>
  return %r
}}
"""


COPY_THROUGH = """    %w = upmem.wram_alloc : memref<16xi32, wram>
    %z = constant {value = 0} : index
    upmem.mram_read %m, %w, %z {row_bytes = 64, rows = 1, stride = 64}
    upmem.mram_write %m, %w, %z {row_bytes = 64, rows = 1, stride = 64}
    upmem.mram_read %m, %w, %z {row_bytes = 64, rows = 1, stride = 64}
    upmem.mram_write %out, %w, %z {row_bytes = 64, rows = 1, stride = 64}
    upmem.barrier_wait"""


def test_read_then_write_back_leaves_mram_unchanged():
    m = parse_module(_program(COPY_THROUGH, size=16, out_size=16))
    a = np.arange(16) - 5
    res, met = simulate(m, [a])
    assert res[0].data.tolist() == a.tolist()
    # the round trip is 128 bytes; the copy to the output adds another 128
    assert met.mram_wram_bytes == 256
    assert (met.launches, met.barriers) == (1, 1)


def test_misaligned_transfer_rejected():
    text = _program(COPY_THROUGH.replace("row_bytes = 64, rows = 1, stride = 64}\n    upmem.mram_write %m",
                                         "row_bytes = 60, rows = 1, stride = 64}\n    upmem.mram_write %m"),
                    size=16, out_size=16)
    with pytest.raises(VerifyError, match="misaligned transfer of 60 bytes"):
        parse_module(text)


def test_out_of_bounds_mram_reports_leaf():
    body = COPY_THROUGH.replace("%z = constant {value = 0}", "%z = constant {value = 8}")
    m = parse_module(_program(body, size=16, out_size=16))
    with pytest.raises(ExecutionError, match=r"out of bounds of a 64-byte buffer at leaf \(0,\)"):
        simulate(m, [np.zeros(16)])


# Phase 1: each tasklet increments its own half of %m. Phase 2: each tasklet
# doubles the *other* half into its half of %out, so it needs the barrier.
TWO_PHASE = """    %t = upmem.tasklet_id {level = 0} : index
    %w = upmem.wram_alloc : memref<2xi32, wram>
    %own = affine_apply %t {coeffs = [8], offset = 0} : index
    upmem.mram_read %m, %w, %own {row_bytes = 8, rows = 1, stride = 8}
    %x = load %w : tensor<2xi32>
    %one = fill {value = 1} : tensor<2xi32>
    %y = upmem.add %x, %one : tensor<2xi32>
    store %y, %w
    upmem.mram_write %m, %w, %own {row_bytes = 8, rows = 1, stride = 8}
    upmem.barrier_wait
    %other = affine_apply %t {coeffs = [-8], offset = 8} : index
    upmem.mram_read %m, %w, %other {row_bytes = 8, rows = 1, stride = 8}
    %p = load %w : tensor<2xi32>
    %q = upmem.add %p, %p : tensor<2xi32>
    store %q, %w
    upmem.mram_write %out, %w, %own {row_bytes = 8, rows = 1, stride = 8}
    upmem.barrier_wait"""


def test_two_tasklets_with_barrier_are_deterministic():
    m = parse_module(_program(TWO_PHASE, n=2))
    a = np.array([1, 2, 3, 4])
    want = [8, 10, 4, 6]  # (other half + 1) * 2
    for order in ("forward", "reverse"):
        res, met = simulate(m, [a], leaf_order=order)
        assert res[0].data.tolist() == want
        assert met.barriers == 2


def test_without_the_barrier_the_schedule_leaks():
    m = parse_module(_program(TWO_PHASE.replace("    upmem.barrier_wait\n    %other", "    %other"), n=2))
    outs = {tuple(simulate(m, [np.array([1, 2, 3, 4])], leaf_order=o)[0][0].data.tolist())
            for o in ("forward", "reverse")}
    assert len(outs) == 2


def test_va_64k_one_round_per_tasklet():
    n = 64 * 1024
    m = single_op_module("add", [t(n), t(n)])
    out, _ = run_pipeline(m, "cinm-to-cnm{wg=1x64x16},cnm-to-upmem")
    (launch,) = [op for op in out.walk() if op.name == "upmem.launch"]
    (loop,) = [op for op in launch.walk() if op.name == "for"]
    assert launch.attrs["chunk"] == 64 and loop.attrs["upper"] == loop.attrs["step"] == 64
    names = [op.name for op in loop.regions[0].ops]
    assert names.count("upmem.mram_read") == 2 and names.count("upmem.mram_write") == 1
    rng = np.random.default_rng(0)
    a, b = rand(rng, (n,)), rand(rng, (n,))
    res, met = simulate(out, [a, b])
    assert res[0].data.tolist() == (a + b).tolist()
    # two input streams plus one output stream
    assert met.mram_wram_bytes == n * 4 * 3


def test_wram_overflow_is_a_capacity_error():
    # 32768 i32 per leaf is 128 KiB against a 4 KiB slice (64 KiB / 16 tasklets)
    m = single_op_module("max", [t(16 * 32768)])
    with pytest.raises(PassFailure, match="WRAM overflow: requires 131080 bytes, available 4096 bytes") as e:
        run_pipeline(m, "cinm-to-cnm{wg=1x16},cnm-to-upmem")
    assert isinstance(e.value.cause, CapacityError)


def test_workgroup_beyond_machine_rejected():
    m = single_op_module("add", [t(64), t(64)])
    with pytest.raises(PassFailure, match="needs 32 tasklets per DPU, only 16 available"):
        run_pipeline(m, "cinm-to-cnm{wg=2x32},cnm-to-upmem")
    run_pipeline(m, "cinm-to-cnm{wg=2x32},cnm-to-upmem{tasklets=32}")


EMPTY_LAUNCH = """func @main() -> tensor<2xi32> {
  %wg = cnm.allocate {dims = [2, 4]} : !cnm.workgroup<2x4>
  %tok = cnm.launch %wg {num_ins = 0} : !cnm.token {
    ^(%i: index, %j: index)
    yield
  }
  cnm.wait %wg, %tok
  %c = fill {value = 7} : tensor<2xi32>
  return %c
}
"""


def test_empty_launch_is_only_a_barrier():
    out, _ = run_pipeline(parse_module(EMPTY_LAUNCH), "cnm-to-upmem")
    (launch,) = [op for op in out.walk() if op.name == "upmem.launch"]
    assert [op.name for op in launch.regions[0].ops] == ["upmem.barrier_wait", "yield"]
    res, met = simulate(out, [])
    assert res[0].data.tolist() == [7, 7]
    assert met.barriers == 2 and met.mram_wram_bytes == 0


def test_mv_64_matches_interpreter_and_reruns_identically():
    m = single_op_module("gemv", [t(64, 64), t(64)])
    out, _ = run_pipeline(m, "cinm-to-cnm{wg=4x16},cnm-to-upmem")
    assert parse_module(print_module(out)) == out
    rng = np.random.default_rng(1)
    args = [rand(rng, (64, 64)), rand(rng, (64,))]
    res, first = simulate(out, args)
    assert [r.data.tolist() for r in res] == run(m, args)
    assert simulate(out, args)[1] == first


def test_zero_size_kernel_moves_nothing():
    m = single_op_module("add", [t(0), t(0)])
    out, _ = run_pipeline(m, "cinm-to-cnm,cnm-to-upmem")
    res, met = simulate(out, [np.zeros(0), np.zeros(0)])
    assert res[0].data.size == 0
    assert all(v == 0 for v in met.counters().values())


# ---------------------------------------------------------------- WRAM locality


def _gemm_traffic(m, k, n, wg, tiles, reuse):
    """Independent count of MRAM<->WRAM bytes for the tiled gemm kernel."""
    leaves = int(np.prod(wg))
    r = ceil(m / leaves)
    tm, tn, tk = tiles
    rp, kp, np_ = ceil(r / tm) * tm, ceil(k / tk) * tk, ceil(n / tn) * tn
    a = rp * kp * (1 if reuse else np_ // tn)
    b = (rp // tm) * kp * np_
    c = rp * np_
    return 4 * leaves * (a + b + c), 4 * leaves * a


def test_mm_256_reuse_divides_a_traffic_by_eight():
    m = single_op_module("gemm", [t(256, 256), t(256, 256)])
    base, _ = run_pipeline(m, "cinm-to-cnm{wg=16x8},cnm-to-upmem")
    opt, _ = run_pipeline(base, "upmem-wram-opt")
    (launch,) = [op for op in base.walk() if op.name == "upmem.launch"]
    assert launch.attrs["tiles"] == [2, 32, 32]
    rng = np.random.default_rng(2)
    a, b = rand(rng, (256, 256)), rand(rng, (256, 256))
    counted = {}
    for name, mod in (("base", base), ("opt", opt)):
        res, met = simulate(mod, [a, b])
        assert res[0].data.tolist() == (a @ b).tolist()
        counted[name] = met.mram_wram_bytes
    total_b, a_b = _gemm_traffic(256, 256, 256, (16, 8), (2, 32, 32), False)
    total_o, a_o = _gemm_traffic(256, 256, 256, (16, 8), (2, 32, 32), True)
    assert (counted["base"], counted["opt"]) == (total_b, total_o)
    assert a_b == 8 * a_o


def test_wram_opt_idempotent_and_noop_on_streams():
    m = single_op_module("gemm", [t(64, 64), t(64, 64)])
    once, _ = run_pipeline(m, "cinm-to-cnm{wg=4x8},cnm-to-upmem,upmem-wram-opt")
    assert run_pipeline(once, "upmem-wram-opt")[0] == once
    va, _ = run_pipeline(single_op_module("add", [t(4096), t(4096)]), "cinm-to-cnm,cnm-to-upmem")
    assert run_pipeline(va, "upmem-wram-opt")[0] == va


def test_mv_with_several_row_strips_saves_vector_reloads():
    m = single_op_module("gemv", [t(4096, 512), t(512)])
    base, _ = run_pipeline(m, "cinm-to-cnm,cnm-to-upmem")
    opt, _ = run_pipeline(base, "upmem-wram-opt")
    rng = np.random.default_rng(3)
    args = [rand(rng, (4096, 512)), rand(rng, (512,))]
    (rb, mb), (ro, mo) = simulate(base, args), simulate(opt, args)
    assert rb[0].data.tolist() == ro[0].data.tolist() == (args[0] @ args[1]).tolist()
    assert mo.mram_wram_bytes < mb.mram_wram_bytes


# ---------------------------------------------------------------- properties


@settings(max_examples=200, deadline=None)
@given(cnm_cases(), st.integers(0, 9999), st.booleans())
def test_end_to_end_soundness_and_tasklet_order(case, seed, optimise):
    kind, types, attrs, wg = case
    m = single_op_module(kind, types, **attrs)
    cnm, _ = run_pipeline(m, f"cinm-to-cnm{{wg={wg}}}")
    out, _ = run_pipeline(cnm, "cnm-to-upmem" + (",upmem-wram-opt" if optimise else ""))
    args = cnm_args(types, np.random.default_rng(seed))
    ref = run(m, args)
    fwd, met = simulate(out, args)
    rev, met_rev = simulate(out, args, leaf_order="reverse")
    assert [v.data.tolist() for v in fwd] == [v.data.tolist() for v in rev] == ref
    assert met == met_rev
    # conservation: every scattered element reaches MRAM, and every leaf reads
    # each of its input views into WRAM at least once
    scattered = sum(4 * np.prod(domain(op.operands[1].type)) for op in cnm.walk() if op.name == "cnm.scatter")
    consumed = sum(4 * np.prod(op.operands[0].type.dims) * sum(np.prod(v.type.shape) for v in launch_parts(op)[1])
                   for op in cnm.walk() if op.name == "cnm.launch")
    assert met.host_to_mram_bytes >= scattered
    assert met.mram_wram_bytes >= consumed


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 48), st.integers(1, 48), st.integers(1, 48), st.sampled_from(["2x4", "1x8", "4"]),
       st.sampled_from([2, 4, 8]), st.booleans())
def test_wram_opt_never_adds_traffic(m_, k, n, wg, tile, gemv):
    types = [t(m_, k), t(k)] if gemv else [t(m_, k), t(k, n)]
    mod = single_op_module("gemv" if gemv else "gemm", types)
    base, _ = run_pipeline(mod, f"cinm-to-cnm{{wg={wg}}},cnm-to-upmem{{wram_tile={tile}}}")
    opt, _ = run_pipeline(base, "upmem-wram-opt")
    args = cnm_args(types, np.random.default_rng(m_ * k))
    (rb, mb), (ro, mo) = simulate(base, args), simulate(opt, args)
    assert [v.data.tolist() for v in rb] == [v.data.tolist() for v in ro] == run(mod, args)
    assert mo.mram_wram_bytes <= mb.mram_wram_bytes
    assert mo.host_to_mram_bytes == mb.host_to_mram_bytes
    if not gemv:
        leaves = int(np.prod([int(x) for x in wg.split("x")]))
        (launch,) = [op for op in base.walk() if op.name == "upmem.launch"]
        reuse = any(op.attrs.get("order") == "kj" for op in opt.walk() if op.name == "upmem.launch")
        want, _ = _gemm_traffic(leaves * ceil(m_ / leaves), k, n, [leaves], launch.attrs["tiles"], reuse)
        assert mo.mram_wram_bytes == want
