import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorseg.attention import (AxialAttentionParams, attention_cost, axial_decoder_block, axis_attention,
                                count_macs, full_attention, init_axial_attention)
from tumorseg.autodiff import Tensor, finite_difference_check

AX = {"x": 2, "y": 3, "z": 4}


def params(c, heads, dim, seed=0, shared=False):
    return init_axial_attention(np.random.default_rng(seed), c, heads, dim, np.float64, shared=shared)


def naive_axis(x, axis, p):
    """Loop over every fiber and every query position."""
    w = {k: v.data for k, v in p.weights[axis].items()}
    xm = np.moveaxis(x, (1, AX[axis]), (-1, -2))  # [..., n, c]
    out = np.zeros_like(xm)
    for idx in np.ndindex(xm.shape[:-2]):
        fiber = xm[idx]
        n = fiber.shape[0]
        heads_out = []
        for h in range(p.heads):
            sl = slice(h * p.head_dim, (h + 1) * p.head_dim)
            q, k, v = fiber @ w["wq"][:, sl], fiber @ w["wk"][:, sl], fiber @ w["wv"][:, sl]
            rows = []
            for i in range(n):
                s = np.array([q[i] @ k[j] for j in range(n)]) / math.sqrt(p.head_dim)
                e = np.exp(s - s.max())
                rows.append((e / e.sum()) @ v)
            heads_out.append(np.array(rows))
        out[idx] = np.concatenate(heads_out, axis=1) @ w["wo"]
    return np.moveaxis(out, (-1, -2), (1, AX[axis]))


def test_length_one_axis_is_projection_chain():
    p = params(4, 2, 3)
    x = np.random.default_rng(1).standard_normal((2, 4, 1, 3, 2))
    w = p.weights["x"]
    expect = np.einsum("bcxyz,cd,de->bexyz", x, w["wv"].data, w["wo"].data)
    np.testing.assert_allclose(axis_attention(Tensor(x), "x", p).data, expect, rtol=0, atol=1e-12)


def test_constant_along_axis_gives_constant_output():
    p = params(3, 2, 2)
    base = np.random.default_rng(2).standard_normal((1, 3, 1, 4, 2))
    x = np.repeat(base, 5, axis=2)
    out = axis_attention(Tensor(x), "x", p).data
    np.testing.assert_allclose(out, np.repeat(out[:, :, :1], 5, axis=2), rtol=0, atol=1e-12)


@pytest.mark.parametrize("axis", ["x", "y", "z"])
def test_single_head_matches_naive_oracle(axis):
    p = params(4, 1, 4, seed=3)
    x = np.random.default_rng(4).standard_normal((1, 4, 3, 3, 3))
    np.testing.assert_allclose(axis_attention(Tensor(x), axis, p).data, naive_axis(x, axis, p), rtol=0, atol=1e-10)


def test_multi_head_matches_naive_oracle():
    p = params(5, 3, 2, seed=5)
    x = np.random.default_rng(6).standard_normal((2, 5, 2, 4, 3))
    for axis in "xyz":
        np.testing.assert_allclose(axis_attention(Tensor(x), axis, p).data, naive_axis(x, axis, p), atol=1e-10)


def test_zero_weights_give_pure_residual():
    p = params(4, 2, 2)
    for w in p.weights.values():
        for t in w.values():
            t.data[...] = 0
    x = np.random.default_rng(7).standard_normal((2, 4, 3, 3, 3))
    np.testing.assert_array_equal(axial_decoder_block(Tensor(x), p).data, x)


def test_block_shape_law():
    p = params(8, 2, 4)
    x = Tensor(np.random.default_rng(8).standard_normal((2, 8, 4, 4, 4)))
    assert axial_decoder_block(x, p).shape == (2, 8, 4, 4, 4)


def test_block_is_sum_of_oracles_plus_input():
    p = params(4, 2, 2, seed=9)
    x = np.random.default_rng(10).standard_normal((1, 4, 3, 3, 3))
    expect = x + sum(naive_axis(x, a, p) for a in "xyz")
    np.testing.assert_allclose(axial_decoder_block(Tensor(x), p).data, expect, rtol=0, atol=1e-10)


def test_axes_have_independent_weights_unless_shared():
    assert not params(4, 1, 2).shared
    sp = params(4, 1, 2, shared=True)
    assert sp.shared


def test_errors():
    p = params(4, 1, 2)
    with pytest.raises(ValueError, match="channel"):
        axis_attention(Tensor(np.zeros((1, 3, 2, 2, 2))), "x", p)
    with pytest.raises(ValueError):
        axis_attention(Tensor(np.zeros((1, 4, 2, 2, 2))), "w", p)
    with pytest.raises(ValueError):
        AxialAttentionParams(1, 2, {"x": {**p.weights["x"], "wo": Tensor(np.zeros((3, 4)))}})


@settings(max_examples=15, deadline=None)
@given(st.sampled_from("xyz"), st.integers(0, 9999))
def test_permutation_equivariance(axis, seed):
    rng = np.random.default_rng(seed)
    p = params(3, 1, 3, seed=seed)
    x = rng.standard_normal((1, 3, 4, 3, 5))
    perm = rng.permutation(x.shape[AX[axis]])
    out = axis_attention(Tensor(x), axis, p).data
    out_p = axis_attention(Tensor(np.take(x, perm, axis=AX[axis])), axis, p).data
    np.testing.assert_allclose(out_p, np.take(out, perm, axis=AX[axis]), rtol=0, atol=1e-12)


def test_block_gradient_check():
    p = params(3, 2, 2, seed=11)
    x = np.random.default_rng(12).standard_normal((1, 3, 3, 2, 3))
    proj = Tensor(np.random.default_rng(13).standard_normal(x.shape))
    err = finite_difference_check(lambda t: (axial_decoder_block(t, p) * proj).sum(), x, 1e-5)
    assert err < 1e-6


# -- cost model ------------------------------------------------------------------

def instrumented(shape, c, heads, dim, kind):
    p = params(c, heads, dim)
    x = Tensor(np.zeros((1, c) + tuple(shape)))
    with count_macs() as counter:
        if kind == "axial":
            axial_decoder_block(x, p)
        else:
            full_attention(x, p)
    return counter


@pytest.mark.parametrize("shape", [(1, 1, 1), (2, 2, 2), (4, 4, 4), (2, 3, 5), (8, 8, 8)])
@pytest.mark.parametrize("kind", ["axial", "full"])
def test_counter_equals_closed_form(shape, kind):
    assert instrumented(shape, 4, 2, 3, kind) == attention_cost(shape, 4, 2, 3, kind).as_counter()


def test_doubling_side_scales_score_term():
    a = [attention_cost((s,) * 3, 8, 2, 4, "axial").scores for s in (4, 8)]
    f = [attention_cost((s,) * 3, 8, 2, 4, "full").scores for s in (4, 8)]
    assert a[1] == 16 * a[0] and f[1] == 64 * f[0]
    assert attention_cost((4,) * 3, 8, 2, 4).scores == 3 * 4 ** 4 * 8


def test_single_voxel_each_axial_pass_costs_one_full_pass():
    ax = attention_cost((1, 1, 1), 4, 2, 2, "axial")
    full = attention_cost((1, 1, 1), 4, 2, 2, "full")
    # one token: every one of the three axis passes is exactly a full-attention pass
    for key, value in ax.as_counter().items():
        assert value == 3 * full.as_counter()[key]


def test_score_ratio_at_side_8():
    ax = attention_cost((8, 8, 8), 8, 2, 4, "axial").scores
    full = attention_cost((8, 8, 8), 8, 2, 4, "full").scores
    assert full / ax == 8 ** 3 / (3 * 8)


def test_cost_errors():
    with pytest.raises(ValueError):
        attention_cost((0, 2, 2), 4, 1, 1)
    with pytest.raises(ValueError):
        attention_cost((2, 2, 2), 4, 1, 1, kind="local")


def test_counter_inactive_outside_context():
    with count_macs() as c:
        pass
    axial_decoder_block(Tensor(np.zeros((1, 2, 2, 2, 2))), params(2, 1, 1))
    assert sum(c.values()) == 0
