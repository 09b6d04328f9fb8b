import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from camforge import fusion
from camforge import tensor as T
from camforge.tensor import ShapeError, Tensor, finite_diff_check
from conftest import random_stochastic


def test_head_average_single_head_is_identity(rng):
    stack = random_stochastic(rng, (2, 1, 5, 5))
    np.testing.assert_array_equal(fusion.head_average(stack).data, stack[:, 0])


def test_head_average_two_permutation_heads():
    stack = np.array([[[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]]])
    np.testing.assert_array_equal(fusion.head_average(stack).data[0], [[0.5, 0.5], [0.5, 0.5]])


def test_block_sum_single_block_is_identity(rng):
    x = random_stochastic(rng, (1, 4, 4))
    np.testing.assert_array_equal(fusion.block_sum(x).data, x[0])


def test_block_sum_of_identical_blocks(rng):
    x = random_stochastic(rng, (4, 4))
    np.testing.assert_allclose(fusion.block_sum(np.stack([x, x, x])).data, 3 * x, rtol=0, atol=1e-15)


def test_block_sum_rows_sum_to_block_count(rng):
    for b in (1, 2, 3, 4):
        out = fusion.block_sum(random_stochastic(rng, (b, 7, 7))).data
        np.testing.assert_allclose(out.sum(axis=-1), b, atol=1e-6)


def test_block_mean_is_block_sum_over_count(rng):
    x = random_stochastic(rng, (3, 6, 6))
    total, mean = fusion.block_sum(x).data, fusion.block_mean(x).data
    np.testing.assert_array_equal(mean, total / 3)
    # the reverse direction can differ by one rounding step
    np.testing.assert_allclose(3 * mean, total, rtol=4e-16, atol=0)
    np.testing.assert_allclose(mean.sum(axis=-1), 1.0, atol=1e-9)


def test_block_mean_single_block_is_identity(rng):
    x = random_stochastic(rng, (1, 4, 4))
    np.testing.assert_array_equal(fusion.block_mean(x).data, x[0])


def test_strip_index_arithmetic():
    x = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(fusion.strip_class_token(x).data, [[4, 5], [7, 8]])
    np.testing.assert_array_equal(fusion.strip_class_token(np.eye(5)).data, np.eye(4))


def test_strip_does_not_renormalise(rng):
    mean = fusion.block_mean(random_stochastic(rng, (2, 5, 5))).data
    stripped = fusion.strip_class_token(mean).data
    np.testing.assert_allclose(stripped.sum(axis=-1), 1.0 - mean[1:, 0], atol=1e-15)
    assert np.all(stripped.sum(axis=-1) < 1.0)


def test_strip_rejects_side_one():
    with pytest.raises(ShapeError):
        fusion.strip_class_token(np.ones((1, 1)))


def test_refine_identity_attention(rng):
    cam = rng.normal(size=(3, 4, 4))
    np.testing.assert_array_equal(fusion.refine_cam(np.eye(16), cam).data, cam)


def test_refine_uniform_attention_hand_value():
    cam = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_allclose(fusion.refine_cam(np.full((4, 4), 0.25), cam).data, 2.5, atol=1e-15)


def test_refine_grid_mismatch():
    with pytest.raises(ShapeError):
        fusion.refine_cam(np.eye(9), np.ones((2, 4, 4)))


def test_noise_identity_and_linearity_in_k(rng):
    refined = rng.normal(size=(2, 3, 3))
    np.testing.assert_array_equal(fusion.inject_noise(np.eye(9), refined, 1.0).data, refined)
    abar = random_stochastic(rng, (9, 9))
    one = fusion.inject_noise(abar, refined, 1.0).data
    two = fusion.inject_noise(abar, refined, 2.0).data
    np.testing.assert_array_equal(two, 2 * one)


def test_noise_rejects_negative_k():
    with pytest.raises(ValueError):
        fusion.inject_noise(np.eye(4), np.ones((1, 2, 2)), -0.5)


def test_watch_noise_records_multipliers():
    with fusion.watch_noise() as calls:
        fusion.inject_noise(np.eye(4), np.ones((1, 2, 2)), 2.0)
    fusion.inject_noise(np.eye(4), np.ones((1, 2, 2)), 3.0)
    assert calls == [2.0]


@pytest.mark.parametrize("seed", range(20))
def test_fusion_chain_matches_loop_oracles(seed):
    rng = np.random.default_rng(seed)
    b, h = rng.integers(1, 5, size=2)
    g = int(rng.integers(1, 5))
    n = g * g
    stack = random_stochastic(rng, (b, h, n + 1, n + 1))
    cam = rng.normal(size=(int(rng.integers(1, 4)), g, g))
    k = float(rng.uniform(0, 3))
    fused = fusion.fuse(stack)
    avg = oracles.head_average(stack)
    np.testing.assert_allclose(fusion.head_average(stack).data, avg, rtol=0, atol=1e-12)
    np.testing.assert_allclose(fused.A.data, oracles.block_sum(avg), rtol=0, atol=1e-12)
    np.testing.assert_allclose(fused.A_bar.data, oracles.block_mean(avg), rtol=0, atol=1e-12)
    np.testing.assert_allclose(fused.A_star.data, oracles.strip(oracles.block_sum(avg)), rtol=0, atol=1e-12)
    refined = fusion.refine_cam(fused.A_star, cam).data
    np.testing.assert_allclose(refined, oracles.refine(fused.A_star.data, cam), rtol=0, atol=1e-12)
    noisy = fusion.inject_noise(fused.A_bar_star, refined, k).data
    np.testing.assert_allclose(noisy, oracles.inject(fused.A_bar_star.data, refined, k), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4))
def test_permuting_heads_and_blocks(seed, b, h):
    rng = np.random.default_rng(seed)
    stack = random_stochastic(rng, (b, h, 5, 5))
    base = fusion.fuse(stack)
    shuffled = fusion.fuse(stack[rng.permutation(b)][:, rng.permutation(h)])
    # float addition is not associative, so "identical" holds to rounding
    np.testing.assert_allclose(shuffled.A.data, base.A.data, rtol=0, atol=1e-14)
    np.testing.assert_allclose(shuffled.A_bar.data, base.A_bar.data, rtol=0, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_refine_and_noise_are_linear_in_cam(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(9, 9))
    m1, m2 = rng.normal(size=(2, 2, 3, 3))
    for f in (lambda m: fusion.refine_cam(a, m).data, lambda m: fusion.inject_noise(a, m, 1.5).data):
        np.testing.assert_allclose(f(alpha * m1 + beta * m2), alpha * f(m1) + beta * f(m2), rtol=0, atol=1e-12)


def test_row_stochasticity_propagates(rng):
    stack = random_stochastic(rng, (3, 4, 10, 10))
    np.testing.assert_allclose(fusion.head_average(stack).data.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(fusion.fuse(stack).A_bar.data.sum(axis=-1), 1.0, atol=1e-9)


def test_composed_chain_gradient(rng):
    logits = rng.normal(size=(2, 2, 5, 5))
    cam = rng.normal(size=(2, 2, 2))
    w = rng.normal(size=(2, 2, 2))

    def chain(t):
        fused = fusion.fuse(T.softmax_rows(t))
        refined = fusion.refine_cam(fused.A_star, cam)
        return T.sum_axis(T.mul(fusion.inject_noise(fused.A_bar_star, refined, 2.0), w))

    assert finite_diff_check(chain, logits) < 1e-6
