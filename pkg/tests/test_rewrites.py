import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cinm.ir import VerifyError, parse_module, print_module, run_pipeline
from cinm.rewrites import rewrite_contraction_to_gemm, rewrite_conv2d_to_gemm
from helpers import rand, run, single_op_module, t

CONTRACTIONS = {
    "contrl": ("aebf,dfce->abcd", (2, 2, 2, 2), (2, 2, 2, 2)),
    "contrs1": ("acd,dbc->ab", (3, 2, 4), (4, 5, 2)),
    "contrs2": ("acd,db->abc", (3, 2, 4), (4, 5)),
}


def _names(m):
    return {op.name for op in m.walk()}


def conv_case(shape_x, shape_f, seed=0):
    rng = np.random.default_rng(seed)
    x, f = rand(rng, shape_x, -9, 9), rand(rng, shape_f, -9, 9)
    m = single_op_module("conv2d", [t(*shape_x), t(*shape_f)])
    return m, x, f


def test_window_sum_filter_of_ones():
    m, x, _ = conv_case((1, 3, 3, 1), (2, 2, 1, 1))
    f = np.ones((2, 2, 1, 1), dtype=np.int64)
    r = rewrite_conv2d_to_gemm(m.clone())
    assert "cinm.conv2d" not in _names(r) and "cinm.gemm" in _names(r)
    out = run(r, [x, f])[0]
    assert out == oracles.conv2d(x.tolist(), f.tolist())
    assert out[0][0][0][0] == int(x[0, 0:2, 0:2, 0].sum())


def test_pointwise_conv_is_single_gemm_same_spatial_size():
    m, x, f = conv_case((1, 4, 5, 3), (1, 1, 3, 2))
    r = rewrite_conv2d_to_gemm(m.clone())
    gemms = [op for op in r.walk() if op.name == "cinm.gemm"]
    assert len(gemms) == 1 and gemms[0].result.type.shape == (20, 2)
    assert run(r, [x, f]) == [oracles.conv2d(x.tolist(), f.tolist())]


def test_module_without_conv_unchanged():
    m = single_op_module("add", [t(2), t(2)])
    assert print_module(rewrite_conv2d_to_gemm(m.clone())) == print_module(m)


def test_strided_conv_rejected():
    text = (
        "func @f(%x: tensor<1x5x5x1xi32>, %w: tensor<3x3x1x1xi32>) -> tensor<1x2x2x1xi32> {\n"
        "  %0 = cinm.conv2d %x, %w {strides = [2, 2]} : tensor<1x2x2x1xi32>\n  return %0\n}\n"
    )
    with pytest.raises(VerifyError, match="unsupported conv form"):
        rewrite_conv2d_to_gemm(parse_module(text))


@settings(max_examples=100)
@given(
    st.integers(1, 2), st.integers(1, 6), st.integers(1, 6), st.integers(1, 3),
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**16),
)
def test_conv_rewrite_matches_direct_convolution(n, h, w, c, kh, kw, fo, seed):
    kh, kw = min(kh, h), min(kw, w)
    m, x, f = conv_case((n, h, w, c), (kh, kw, c, fo), seed)
    r, _ = run_pipeline(m, "conv-to-gemm")
    assert run(r, [x, f]) == [oracles.conv2d(x.tolist(), f.tolist())]


@pytest.mark.parametrize("name", sorted(CONTRACTIONS))
def test_benchmark_contractions_match_einsum(name):
    spec, sa, sb = CONTRACTIONS[name]
    rng = np.random.default_rng(7)
    a, b = rand(rng, sa), rand(rng, sb)
    m = single_op_module("contract", [t(*sa), t(*sb)], spec=spec)
    r = rewrite_contraction_to_gemm(m.clone())
    assert [op.name for op in r.walk()].count("cinm.gemm") == 1
    assert "cinm.contract" not in _names(r)
    assert run(r, [a, b]) == [oracles.einsum(spec, a.tolist(), b.tolist())]


def test_matmul_contraction_needs_no_permutes():
    m = single_op_module("contract", [t(3, 4), t(4, 5)], spec="ik,kj->ij")
    r = rewrite_contraction_to_gemm(m)
    assert [op.name for op in r.walk()] == ["cinm.gemm", "return"]


@pytest.mark.parametrize(
    "spec, msg",
    [
        ("ab,bc->aa", "repeated output index"),
        ("ab,bc->abc", "batch index 'b'"),
        ("ab,cd->ac", "summed over a single operand"),
    ],
)
def test_contraction_diagnostics(spec, msg):
    from cinm.rewrites import contraction_plan

    with pytest.raises(VerifyError, match=msg):
        contraction_plan(spec)
