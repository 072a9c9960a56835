import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from segattack import simcore
from segattack.errors import ConfigError, InvalidInputError, ShapeError
from segattack.simcore import (
    EmptyMaskWarning,
    FeatureMap,
    build_mask,
    combined_loss,
    external_similarity,
    gram,
    internal_similarity,
    normalize_pixels,
)

from .oracles import central_diff, naive_external, naive_internal


def rand_feats(rng, c, n):
    return torch.from_numpy(rng.normal(size=(c, n)))


# --- normalize_pixels ----------------------------------------------------------


def test_normalize_345():
    out = normalize_pixels(torch.tensor([[3.0], [4.0]], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([[0.6], [0.8]], dtype=torch.float64), atol=1e-15)


def test_normalize_zero_column_stays_zero():
    f = torch.zeros(4, 3, dtype=torch.float64)
    f[:, 1] = torch.tensor([1.0, 2.0, 2.0, 0.0])
    out = normalize_pixels(f, 1e-12)
    assert torch.equal(out[:, 0], torch.zeros(4, dtype=torch.float64))
    assert torch.isfinite(out).all()


def test_normalize_idempotent_on_unit_columns():
    rng = np.random.default_rng(1)
    f = normalize_pixels(rand_feats(rng, 5, 7))
    assert torch.allclose(normalize_pixels(f), f, atol=1e-12)


def test_normalize_rejects_nonfinite():
    f = torch.ones(2, 2)
    f[0, 0] = float("nan")
    with pytest.raises(InvalidInputError):
        normalize_pixels(f)
    with pytest.raises(ConfigError):
        normalize_pixels(torch.ones(2, 2), eps_norm=0)


# --- external_similarity ------------------------------------------------------------


def test_external_identity_and_antipodal():
    rng = np.random.default_rng(2)
    f = rand_feats(rng, 4, 9)
    assert float(external_similarity(f, f)) == pytest.approx(1.0, abs=1e-12)
    assert float(external_similarity(f, -f)) == pytest.approx(-1.0, abs=1e-12)


def test_external_orthogonal():
    fx = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    fa = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    assert float(external_similarity(fx, fa)) == pytest.approx(0.0, abs=1e-15)


def test_external_matches_naive():
    rng = np.random.default_rng(3)
    fx, fa = rand_feats(rng, 6, 11), rand_feats(rng, 6, 11)
    assert float(external_similarity(fx, fa)) == pytest.approx(naive_external(fx.numpy(), fa.numpy()), rel=1e-12)


def test_external_shape_mismatch():
    with pytest.raises(ShapeError):
        external_similarity(torch.ones(3, 4), torch.ones(3, 5))


# --- gram / mask -------------------------------------------------------------------------


def test_gram_small_cases():
    one = gram(torch.tensor([[2.0], [1.0]], dtype=torch.float64))
    assert one.shape == (1, 1) and float(one) == pytest.approx(1.0)
    same = gram(torch.tensor([[1.0, 1.0], [2.0, 2.0]], dtype=torch.float64))
    assert torch.allclose(same, torch.ones(2, 2, dtype=torch.float64))
    eye = gram(torch.eye(2, dtype=torch.float64))
    assert torch.allclose(eye, torch.eye(2, dtype=torch.float64))


def test_mask_all_ones_below_minus_one():
    rng = np.random.default_rng(4)
    m = build_mask(rand_feats(rng, 3, 6), tau=-1.1)
    assert m.count_k == 36 and bool(m.values.all())


def test_mask_orthonormal_is_identity():
    m = build_mask(torch.eye(5, dtype=torch.float64), tau=0.5)
    assert torch.equal(m.values, torch.eye(5, dtype=torch.bool))
    assert m.count_k == 5


def test_mask_strict_threshold():
    # the two columns have cosine exactly 0.5; a tie maps to 0
    fx = torch.tensor([[1.0, 0.5], [0.0, math.sqrt(3) / 2]], dtype=torch.float64)
    assert float(gram(fx)[0, 1]) == pytest.approx(0.5, abs=1e-15)
    m = build_mask(fx, tau=float(gram(fx)[0, 1]))
    assert not bool(m.values[0, 1])


def test_mask_rejects_tau_at_least_one():
    with pytest.raises(ConfigError):
        build_mask(torch.ones(2, 2), tau=1.0)


def test_default_tau():
    assert simcore.DEFAULT_TAU == pytest.approx(0.5, abs=1e-15)


# --- internal_similarity -----------------------------------------------------------------


def test_internal_identity_mask_gives_half():
    rng = np.random.default_rng(5)
    fa = rand_feats(rng, 5, 5)
    val = internal_similarity(torch.eye(5, dtype=torch.float64), fa, tau=0.5)
    assert float(val) == pytest.approx(0.5, abs=1e-12)


def test_internal_identical_columns_gives_half():
    col = torch.tensor([[1.0], [2.0], [-1.0]], dtype=torch.float64)
    f = col.repeat(1, 6)
    assert float(internal_similarity(f, f, tau=0.5)) == pytest.approx(0.5, abs=1e-12)


def test_internal_matches_naive_n8():
    rng = np.random.default_rng(6)
    fx, fa = rand_feats(rng, 4, 8), rand_feats(rng, 4, 8)
    ref = naive_internal(fx.numpy(), fa.numpy(), 0.5)
    assert float(internal_similarity(fx, fa, 0.5)) == pytest.approx(ref, rel=1e-12)


def test_internal_empty_mask_warns_and_returns_zero():
    # zero clean features: every cosine is 0, nothing clears tau=0.5
    fx = torch.zeros(3, 4, dtype=torch.float64)
    fa = torch.ones(3, 4, dtype=torch.float64)
    with pytest.warns(EmptyMaskWarning):
        val = internal_similarity(fx, fa, tau=0.5)
    assert float(val) == 0.0


def test_internal_tiled_matches_dense():
    rng = np.random.default_rng(7)
    fx, fa = rand_feats(rng, 4, 50), rand_feats(rng, 4, 50)
    dense = internal_similarity(fx, fa, 0.2)
    tiled = internal_similarity(fx, fa, 0.2, n_max=10, tile=7)
    assert float(tiled) == pytest.approx(float(dense), rel=1e-12)


def test_internal_tiled_gradient_matches_dense():
    rng = np.random.default_rng(8)
    fx = rand_feats(rng, 3, 30)
    fa1 = rand_feats(rng, 3, 30).requires_grad_(True)
    fa2 = fa1.detach().clone().requires_grad_(True)
    internal_similarity(fx, fa1, 0.1).backward()
    internal_similarity(fx, fa2, 0.1, n_max=5, tile=8).backward()
    assert torch.allclose(fa1.grad, fa2.grad, rtol=1e-10, atol=1e-14)


def test_internal_precomputed_mask():
    rng = np.random.default_rng(9)
    fx, fa = rand_feats(rng, 4, 12), rand_feats(rng, 4, 12)
    m = build_mask(fx, 0.3)
    assert float(internal_similarity(fx, fa, 0.3, mask=m)) == pytest.approx(float(internal_similarity(fx, fa, 0.3)))


# --- combined_loss -------------------------------------------------------------------------


def test_combined_at_t0_is_internal():
    rng = np.random.default_rng(10)
    fx, fa = rand_feats(rng, 4, 10), rand_feats(rng, 4, 10)
    br = combined_loss(fx, fa, 0, 20)
    assert br.lambda_t == 0.0
    assert float(br.combined) == float(br.l_in)


def test_combined_midpoint():
    rng = np.random.default_rng(11)
    fx, fa = rand_feats(rng, 4, 10), rand_feats(rng, 4, 10)
    br = combined_loss(fx, fa, 10, 20)
    assert br.lambda_t == 0.5
    assert float(br.combined) == pytest.approx((float(br.l_ex) + float(br.l_in)) / 2, abs=1e-15)


@pytest.mark.parametrize("t,T", [(20, 20), (-1, 20), (0, 0)])
def test_combined_rejects_bad_schedule(t, T):
    f = torch.ones(2, 3)
    with pytest.raises(ConfigError):
        combined_loss(f, f, t, T)


def test_combined_flags_empty_mask():
    fx = torch.zeros(3, 4, dtype=torch.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        br = combined_loss(fx, torch.ones(3, 4, dtype=torch.float64), 3, 20)
    assert br.empty_mask and float(br.l_in) == 0.0


def test_feature_map_from_activation_row_major():
    act = torch.arange(2 * 3 * 4, dtype=torch.float32).reshape(1, 2, 3, 4)
    f = FeatureMap.from_activation(act)
    assert (f.height, f.width, f.pixels, f.channels) == (3, 4, 12, 2)
    # pixel (r, c) is column r * w + c
    assert torch.equal(f.values[:, 1 * 4 + 2], act[0, :, 1, 2])
    with pytest.raises(ShapeError):
        FeatureMap(torch.ones(2, 5), 2, 2)


# --- properties ------------------------------------------------------------------------------

feature_shapes = st.tuples(st.integers(1, 8), st.integers(1, 24), st.integers(0, 2**31 - 1))


@settings(max_examples=40, deadline=None)
@given(feature_shapes, st.floats(-0.99, 0.99))
def test_gram_and_mask_symmetric_and_bounded(shape, tau):
    c, n, seed = shape
    f = rand_feats(np.random.default_rng(seed), c, n)
    s = gram(f)
    assert float((s - s.T).abs().max()) <= 1e-12
    assert float(s.max()) <= 1 + 1e-9 and float(s.min()) >= -1 - 1e-9
    m = build_mask(f, tau)
    assert torch.equal(m.values, m.values.T)
    assert m.count_k == int(m.values.sum())


@settings(max_examples=40, deadline=None)
@given(feature_shapes, st.floats(-1.0, 0.98), st.floats(0.0, 0.5))
def test_mask_monotone_in_tau(shape, tau1, gap):
    c, n, seed = shape
    tau2 = min(tau1 + gap, 0.99)
    f = rand_feats(np.random.default_rng(seed), c, n)
    m1, m2 = build_mask(f, tau1), build_mask(f, tau2)
    assert bool((m1.values | ~m2.values).all())
    assert m1.count_k >= m2.count_k


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 64), st.integers(0, 2**31 - 1), st.floats(-0.9, 0.9))
def test_internal_oracle_equivalence_property(c, n, seed, tau):
    rng = np.random.default_rng(seed)
    fx, fa = rand_feats(rng, c, n), rand_feats(rng, c, n)
    ref = naive_internal(fx.numpy(), fa.numpy(), tau)
    got = float(internal_similarity(fx, fa, tau))
    assert got == pytest.approx(ref, rel=1e-9, abs=1e-15)


# --- gradients --------------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_external_gradient_finite_difference(seed):
    rng = np.random.default_rng(100 + seed)
    c, n = int(rng.integers(1, 5)), int(rng.integers(2, 17))
    fx, fa = rand_feats(rng, c, n), rand_feats(rng, c, n).requires_grad_(True)
    external_similarity(fx, fa).backward()
    fd = central_diff(lambda a: float(external_similarity(fx, a)), fa.detach(), 1e-4)
    assert float((fa.grad - fd).norm() / fd.norm()) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_internal_gradient_finite_difference(seed):
    rng = np.random.default_rng(200 + seed)
    c, n = int(rng.integers(1, 5)), int(rng.integers(2, 17))
    fx, fa = rand_feats(rng, c, n), rand_feats(rng, c, n).requires_grad_(True)
    internal_similarity(fx, fa, 0.0).backward()
    fd = central_diff(lambda a: float(internal_similarity(fx, a, 0.0)), fa.detach(), 1e-4)
    assert float((fa.grad - fd).norm() / max(float(fd.norm()), 1e-12)) < 1e-4


def test_gram_diagonal_has_no_gradient():
    rng = np.random.default_rng(300)
    fa = rand_feats(rng, 4, 9).requires_grad_(True)
    torch.diagonal(gram(fa)).sum().backward()
    assert float(fa.grad.abs().max()) < 1e-9


def test_diagonal_terms_do_not_change_internal_gradient():
    rng = np.random.default_rng(301)
    fx = rand_feats(rng, 3, 10)
    m = build_mask(fx, 0.0)
    off = simcore.SimilarityMask(m.values & ~torch.eye(10, dtype=torch.bool), m.count_k)
    fa1 = rand_feats(rng, 3, 10).requires_grad_(True)
    fa2 = fa1.detach().clone().requires_grad_(True)
    # same K in both, so only the diagonal entries differ between the two sums
    internal_similarity(fx, fa1, 0.0, mask=m).backward()
    internal_similarity(fx, fa2, 0.0, mask=off).backward()
    assert float((fa1.grad - fa2.grad).abs().max()) < 1e-9
