import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from synseg import autodiff as ad
from synseg.autodiff import Parameter, Tensor
from synseg.mccl import (TERMS, LossWeights, image_losses, loss_align, loss_back, loss_cont, loss_sep,
                         naive_oracle_losses, total_loss, weighted_total)

FLOOR = -math.log(0.995)  # value of -log(clip(cos)) at the upper clip
CEIL = -math.log(0.005)


def rand_triple(seed, n=None, d=None, dtype=np.float64):
    r = np.random.default_rng(seed)
    n = n or int(r.integers(1, 7))
    d = d or int(r.integers(4, 17))
    return tuple(r.standard_normal((n, d)).astype(dtype) for _ in range(3))


def values(F, Fb, T):
    return {k: v.item() for k, v in image_losses(F, Fb, T).items()}


@pytest.mark.parametrize("seed", range(100))
def test_vectorized_matches_scalar_oracle(seed):
    F, Fb, T = rand_triple(seed)
    got, want = values(F, Fb, T), naive_oracle_losses(F, Fb, T)
    for k in TERMS:
        assert abs(got[k] - want[k]) <= 1e-6, k


def test_single_category_pair_terms_are_diagonal_constants():
    F, Fb, T = rand_triple(0, n=1, d=6)
    v = values(F, Fb, T)
    assert v["back"] == pytest.approx(FLOOR)
    assert v["sep"] == pytest.approx(CEIL)


def test_align_hand_value():
    F = np.array([[1.0, 0.0]])
    T = np.array([[1.0, 1.0]])
    assert loss_align(F, T).item() == pytest.approx(-math.log(math.sqrt(0.5)))


def test_cont_orthogonal_pair_hits_floor():
    assert loss_cont(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item() == pytest.approx(-math.log(0.995))


def test_sep_two_orthogonal_foregrounds():
    F = np.array([[1.0, 0.0], [0.0, 1.0]])
    # diagonal: 2 * -log(0.005); off-diagonal: 2 * -log(0.995); over N^2 = 4
    assert loss_sep(F).item() == pytest.approx((2 * CEIL + 2 * FLOOR) / 4)


def test_back_two_opposite_backgrounds():
    Fb = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert loss_back(Fb).item() == pytest.approx((2 * FLOOR + 2 * CEIL) / 4)


@given(st.integers(0, 2**31 - 1))
def test_losses_finite_and_positive(seed):
    for k, v in values(*rand_triple(seed)).items():
        assert math.isfinite(v) and v > 0, k


def test_diagonal_terms_carry_no_gradient():
    r = np.random.default_rng(3)
    f = r.standard_normal(5)
    # with N = 1 only the diagonal exists: zero gradient for back and sep
    for fn in (loss_back, loss_sep):
        p = Parameter(f.reshape(1, 5))
        ad.backward(fn(p))
        assert np.abs(p.grad).max() <= 1e-7
        bumped = f + 1e-3 * r.standard_normal(5)
        assert abs(fn(bumped.reshape(1, 5)).item() - fn(f.reshape(1, 5)).item()) <= 1e-7


def test_mismatched_stacks_rejected():
    with pytest.raises(ad.ShapeError):
        loss_align(np.ones((2, 4)), np.ones((3, 4)))
    with pytest.raises(ad.ShapeError):
        loss_cont(np.ones((2, 4)), np.ones((2, 5)))


def test_zero_feature_rejected():
    F, Fb, T = rand_triple(1, n=2, d=4)
    F[1] = 0.0
    with pytest.raises(ad.DegenerateFeatureError):
        loss_sep(F)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(align=-1.0)
    with pytest.raises(ValueError):
        LossWeights(back=float("nan"))
    assert LossWeights().as_tuple() == (1.0, 1.0, 10.0, 1.0)


def test_weighted_total_skips_zero_weights():
    F, Fb, T = rand_triple(2, n=3, d=6)
    terms = image_losses(F, Fb, T)
    w = LossWeights(align=2.0, cont=0.0, back=0.5, sep=0.0)
    want = 2.0 * terms["align"].item() + 0.5 * terms["back"].item()
    assert weighted_total(terms, w).item() == pytest.approx(want)


def test_total_loss_is_mean_over_images_and_report_recombines():
    batch = [rand_triple(s) for s in range(4)]
    total, report = total_loss(batch, image_ids=list("abcd"))
    per = [weighted_total(image_losses(*b), LossWeights()).item() for b in batch]
    assert total.item() == pytest.approx(np.mean(per))
    assert report.total == pytest.approx(LossWeights().combine(report.terms()), abs=1e-9)
    assert report.total == pytest.approx(total.item(), abs=1e-9)
    assert report.image_ids == list("abcd") and len(report.per_image) == 4


def test_total_loss_empty_batch_rejected():
    with pytest.raises(ValueError):
        total_loss([])


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("term", TERMS + ("total",))
def test_loss_gradients_wrt_features(seed, term):
    F, Fb, T = rand_triple(seed, n=3, d=6)

    def fn(f, fb):
        terms = image_losses(f, fb, T)
        return weighted_total(terms, LossWeights()) if term == "total" else terms[term]

    pf, pfb = Parameter(F.copy()), Parameter(Fb.copy())
    ad.backward(fn(pf, pfb))
    nf = ad.finite_difference_grad(lambda x: fn(Tensor(x), Tensor(Fb)).item(), F)
    nfb = ad.finite_difference_grad(lambda x: fn(Tensor(F), Tensor(x)).item(), Fb)
    assert ad.relative_error(pf.grad, nf) <= 1e-3
    assert ad.relative_error(pfb.grad, nfb) <= 1e-3


def _step(F, lr, fn):
    p = Parameter(F.copy())
    ad.backward(fn(p))
    return F - lr * p.grad


@pytest.mark.parametrize("seed", range(10))
def test_one_align_step_raises_mean_cosine(seed):
    F, _, T = rand_triple(seed, n=4, d=8)
    cos = lambda X: np.mean(np.sum(X * T, 1) / (np.linalg.norm(X, axis=1) * np.linalg.norm(T, axis=1)))
    assert cos(_step(F, 0.05, lambda f: loss_align(f, T))) > cos(F)


@pytest.mark.parametrize("seed", range(10))
def test_one_sep_step_lowers_max_off_diagonal_cosine(seed):
    F, _, _ = rand_triple(seed, n=4, d=8)
    F = F + 2.0  # start well inside the clip so the gradient is active

    def max_off(X):
        U = X / np.linalg.norm(X, axis=1, keepdims=True)
        C = U @ U.T
        return C[~np.eye(len(X), dtype=bool)].max()

    assert max_off(_step(F, 0.05, loss_sep)) < max_off(F)
