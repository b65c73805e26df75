import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ecgan_lab.losses import (
    LossWeights,
    adversarial_discriminator_loss,
    classification_loss,
    combined_adversarial_scores,
    composite_discriminator_loss,
    composite_generator_loss,
    conditional_contrastive_loss,
    generator_adversarial_loss,
    hinge_discriminator_loss,
    wasserstein_pair_losses,
)

scalars = st.floats(-20, 20, allow_nan=False)


def _f(t):
    return float(t)


def contrastive_loops(l, e, y, t, self_positive=True):
    """Pair-by-pair evaluation of the contrastive formula with Python sums."""
    m = len(y)
    d = lambda a, b: math.exp(float(np.dot(a, b)) / t)  # noqa: E731
    total = 0.0
    for i in range(m):
        anchor = d(l[i], e[i])
        num = anchor + sum(d(l[i], l[k]) for k in range(m)
                           if y[k] == y[i] and (self_positive or k != i))
        den = anchor + sum(d(l[i], l[k]) for k in range(m) if k != i)
        total += math.log(num / den)
    return total / m


# -- adversarial pieces


@pytest.mark.parametrize("real,fake,expected", [((0, 0), None, (0, 0)), ((1, -1), None, (-2, 1))])
def test_wasserstein_pair(real, fake, expected):
    d, g = wasserstein_pair_losses(*real)
    assert (_f(d), _f(g)) == expected


@given(a=scalars)
def test_wasserstein_cancellation(a):
    d, g = wasserstein_pair_losses(a, a)
    assert _f(d) == 0 and _f(g) == -a


@pytest.mark.parametrize("real,fake,expected", [(1, -1, 0), (0, 0, 2), (-1, 2, 5)])
def test_hinge_examples(real, fake, expected):
    assert _f(hinge_discriminator_loss(real, fake, 1.0)) == expected


def test_hinge_batch_mean():
    real = torch.tensor([1.0, 0.0], dtype=torch.float64)
    fake = torch.tensor([-1.0, 2.0], dtype=torch.float64)
    # mean(0, 1) + mean(0, 3)
    assert _f(hinge_discriminator_loss(real, fake)) == 2.0


@given(r=scalars, f=scalars)
def test_hinge_subgradient_beyond_margin(r, f):
    real = torch.tensor(r, dtype=torch.float64, requires_grad=True)
    fake = torch.tensor(f, dtype=torch.float64, requires_grad=True)
    hinge_discriminator_loss(real, fake).backward()
    if r > 1:
        assert real.grad == 0
    elif r < 1:
        assert real.grad == -1
    if f < -1:
        assert fake.grad == 0
    elif f > -1:
        assert fake.grad == 1


@given(a=scalars, b=scalars, lam=st.floats(0, 1))
def test_hinge_convex_in_real_score(a, b, lam):
    h = lambda r: _f(hinge_discriminator_loss(r, 0.3))  # noqa: E731
    mid = lam * a + (1 - lam) * b
    assert h(mid) <= lam * h(a) + (1 - lam) * h(b) + 1e-9


def test_combined_scores():
    assert _f(combined_adversarial_scores(2, 3, 0)) == 2
    assert _f(combined_adversarial_scores(2, 3, 1)) == 5


def test_combined_scores_alpha_zero_ignores_h():
    assert _f(combined_adversarial_scores(2, None, 0)) == 2


def test_separate_hinge_termwise():
    w = LossWeights(alpha=1.0, combined_hinge=False)
    assert _f(adversarial_discriminator_loss(1, -1, 1, -1, w)) == 0
    # hinge(0.5, 0.2) + 2 * hinge(0.1, -3) = (0.5 + 1.2) + 2 * 0.9
    w2 = LossWeights(alpha=2.0, combined_hinge=False)
    assert _f(adversarial_discriminator_loss(0.5, 0.2, 0.1, -3, w2)) == pytest.approx(3.5, abs=1e-15)


def test_combined_hinge_on_joint_score():
    w = LossWeights(alpha=2.0)
    # max(0, 1 - (0.5 + 0.2)) + max(0, 1 + (0.1 + 2 * -3))
    assert _f(adversarial_discriminator_loss(0.5, 0.1, 0.1, -3, w)) == pytest.approx(0.3, abs=1e-15)


@pytest.mark.parametrize("f,h,alpha,expected", [(2, 3, 1, -5), (2, 3, 0, -2), (0, 0, 7.5, 0)])
def test_generator_adversarial(f, h, alpha, expected):
    assert _f(generator_adversarial_loss(f, h, alpha)) == expected


# -- classification


def test_classification_uniform():
    assert _f(classification_loss(torch.zeros(10, dtype=torch.float64), [3])) == pytest.approx(
        math.log(10), abs=1e-15)


def test_classification_confident():
    expected = math.log1p(2 * math.exp(-10))
    got = _f(classification_loss(torch.tensor([10.0, 0.0, 0.0], dtype=torch.float64), [0]))
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(9.0799e-5, rel=1e-4)


def test_classification_rejects_bad_label():
    with pytest.raises(ValueError):
        classification_loss(torch.zeros(3), [3])
    with pytest.raises(ValueError):
        classification_loss(torch.zeros(3), [-1])


@settings(max_examples=50)
@given(seed=st.integers(0, 2**31), c=st.floats(-100, 100))
def test_classification_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    f = torch.as_tensor(rng.normal(size=(4, 6)))
    y = rng.integers(0, 6, size=4)
    assert _f(classification_loss(f + c, y)) == pytest.approx(_f(classification_loss(f, y)), abs=1e-12)


def test_classification_monotone_in_true_logit():
    vals = [_f(classification_loss(torch.tensor([a, 0.0, 0.0], dtype=torch.float64), [0]))
            for a in np.linspace(-5, 30, 50)]
    assert all(v > 0 for v in vals)
    assert all(b < a for a, b in zip(vals, vals[1:]))


# -- contrastive


def test_contrastive_single_element():
    l = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
    for t in (0.1, 1.0, 3.0):
        got = _f(conditional_contrastive_loss(l, l, [0], t))
        assert got == pytest.approx(math.log(2), abs=1e-12)


def test_contrastive_single_element_without_self():
    l = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
    assert _f(conditional_contrastive_loss(l, l, [0], 1.0, self_positive=False)) == pytest.approx(0.0, abs=1e-15)


def test_contrastive_orthogonal_distinct_labels():
    l = np.eye(4)
    e = np.roll(np.eye(4), 1, axis=0)
    y = [0, 1, 2, 3]
    expected = contrastive_loops(l, e, y, 1.0)
    got = _f(conditional_contrastive_loss(torch.as_tensor(l), torch.as_tensor(e), y, 1.0))
    assert got == pytest.approx(expected, abs=1e-12)


def test_contrastive_large_temperature_limit():
    rng = np.random.default_rng(3)
    l, e = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    y = np.array([0, 0, 1, 2, 2, 2])
    counts = np.array([(y == y[i]).sum() for i in range(6)])
    limit = np.mean(np.log((1 + counts) / (1 + 5)))
    got = _f(conditional_contrastive_loss(torch.as_tensor(l), torch.as_tensor(e), y, 1e6))
    assert got == pytest.approx(limit, abs=1e-5)


@settings(max_examples=60)
@given(seed=st.integers(0, 2**31), m=st.integers(1, 9), t=st.floats(0.2, 5),
       self_pos=st.booleans())
def test_contrastive_matches_loops(seed, m, t, self_pos):
    rng = np.random.default_rng(seed)
    l, e = rng.normal(size=(m, 3)), rng.normal(size=(m, 3))
    y = rng.integers(0, 3, size=m)
    got = _f(conditional_contrastive_loss(torch.as_tensor(l), torch.as_tensor(e), y, t, self_pos))
    assert got == pytest.approx(contrastive_loops(l, e, y, t, self_pos), rel=1e-10, abs=1e-10)


@settings(max_examples=30)
@given(seed=st.integers(0, 2**31))
def test_contrastive_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    l, e = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    y = rng.integers(0, 3, size=8)
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    a = _f(conditional_contrastive_loss(torch.as_tensor(l), torch.as_tensor(e), y, 0.7))
    b = _f(conditional_contrastive_loss(torch.as_tensor(l @ q), torch.as_tensor(e @ q), y, 0.7))
    assert a == pytest.approx(b, abs=1e-9)


# -- composites


def _boom():
    raise AssertionError("disabled term was evaluated")


def test_composite_all_weights_zero_is_hinge():
    w = LossWeights()
    got = composite_discriminator_loss(0.2, -0.4, w, h_real=_boom, h_fake=_boom,
                                       clf=_boom, contrastive_real=_boom)
    assert _f(got) == _f(hinge_discriminator_loss(0.2, -0.4))
    assert _f(composite_generator_loss(0.7, w, h_fake=_boom, contrastive_fake=_boom)) == -0.7


def test_composite_clf_only():
    w = LossWeights(lambda_clf=1.0)
    got = composite_discriminator_loss(0.2, -0.4, w, clf=0.25, contrastive_real=_boom)
    assert _f(got) == _f(hinge_discriminator_loss(0.2, -0.4)) + 0.25


@settings(max_examples=100)
@given(parts=st.lists(scalars, min_size=8, max_size=8),
       weights=st.lists(st.floats(0, 5), min_size=3, max_size=3))
def test_composite_linearity(parts, weights):
    f_r, f_f, h_r, h_f, clf, lc_r, lc_f, _ = parts
    alpha, lam_c, lam_clf = weights
    w = LossWeights(alpha=alpha, lambda_c=lam_c, lambda_clf=lam_clf)
    adv = max(0.0, 1 - (f_r + alpha * h_r)) + max(0.0, 1 + (f_f + alpha * h_f))
    expected_d = adv + lam_c * lc_r + lam_clf * clf
    got_d = composite_discriminator_loss(f_r, f_f, w, h_real=h_r, h_fake=h_f, clf=clf,
                                         contrastive_real=lc_r)
    assert _f(got_d) == pytest.approx(expected_d, abs=1e-12 * max(1.0, abs(expected_d)))
    expected_g = -f_f - alpha * h_f + lam_c * lc_f
    got_g = composite_generator_loss(f_f, w, h_fake=h_f, contrastive_fake=lc_f)
    assert _f(got_g) == pytest.approx(expected_g, abs=1e-12 * max(1.0, abs(expected_g)))


def test_negated_contrastive_flag():
    w = LossWeights(lambda_c=2.0, negate_contrastive=True)
    assert _f(composite_generator_loss(0.0, w, contrastive_fake=0.5)) == -1.0


def test_constant_entropy_approximation_has_no_contrastive_term():
    terms: dict = {}
    composite_discriminator_loss(0.0, 0.0, LossWeights(alpha=1.0, lambda_clf=1.0), h_real=0.0,
                                 h_fake=0.0, clf=0.1, contrastive_real=_boom, terms=terms)
    assert "contrastive" not in terms


@pytest.mark.parametrize("field,value", [("alpha", -1.0), ("temperature", 0.0),
                                         ("margin", -1.0), ("lambda_c", float("nan"))])
def test_loss_weights_validation(field, value):
    with pytest.raises(ValueError):
        LossWeights(**{field: value})
