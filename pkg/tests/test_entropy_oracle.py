import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from ecgan_lab.entropy_oracle import (
    Critic,
    DiscreteJoint,
    PartitionInstance,
    brute_force_log_partition,
    contrastive_bound_batch,
    duality_gap,
    duality_suite,
    entropy_bound_check,
    gibbs,
    kl_divergence,
    random_joint,
    unit_rows,
    variational_objective,
)

energy_tables = st.integers(0, 2**31).map(
    lambda s: PartitionInstance(np.random.default_rng(s).normal(scale=3, size=np.random.default_rng(s).integers(1, 40))))


# -- variational log partition


def test_uniform_energies():
    inst = PartitionInstance(np.zeros(4))
    assert brute_force_log_partition(inst) == pytest.approx(math.log(4), abs=1e-15)
    assert duality_gap(np.full(4, 0.25), inst) == pytest.approx(0.0, abs=1e-15)


def test_point_mass_gap():
    inst = PartitionInstance(np.array([0.0, 0.0]))
    assert duality_gap(np.array([1.0, 0.0]), inst) == pytest.approx(math.log(2), abs=1e-15)


def test_log_partition_against_scipy():
    f = np.random.default_rng(0).normal(scale=20, size=50)
    assert brute_force_log_partition(PartitionInstance(f)) == pytest.approx(logsumexp(f), abs=1e-12)


@settings(max_examples=50)
@given(inst=energy_tables, seed=st.integers(0, 2**31))
def test_gap_equals_kl_and_is_nonnegative(inst, seed):
    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.full(inst.size, 0.5))
    p = gibbs(inst)
    gap = duality_gap(q, inst)
    assert gap >= -1e-12
    assert gap == pytest.approx(float(kl_divergence(q, p)), abs=1e-9)
    assert variational_objective(q, inst) <= brute_force_log_partition(inst) + 1e-12


@settings(max_examples=50)
@given(inst=energy_tables)
def test_gibbs_attains_log_partition(inst):
    assert abs(duality_gap(gibbs(inst), inst)) <= 1e-9


def test_per_class_table():
    f = np.random.default_rng(1).normal(size=(10, 3))
    inst = PartitionInstance(f)
    for y in range(3):
        assert brute_force_log_partition(inst, y) == pytest.approx(logsumexp(f[:, y]), abs=1e-12)
    with pytest.raises(ValueError):
        inst.column(None)


@pytest.mark.parametrize("q", [np.array([0.5, 0.6]), np.array([1.5, -0.5]), np.array([1.0])])
def test_invalid_distribution_rejected(q):
    with pytest.raises(ValueError):
        duality_gap(q, PartitionInstance(np.zeros(2)))


def test_small_duality_suite():
    rep = duality_suite(n_instances=5, n_q=50, seed=3)
    assert rep.passed == 5 and not rep.failures


# -- contrastive entropy bound


def loop_bound(l, e, t, form):
    """Per-batch InfoNCE value with explicit loops."""
    m = len(l)
    total = 0.0
    for i in range(m):
        if form == "paired":
            s = [float(l[i] @ (e[i] if j == i else l[j])) / t for j in range(m)]
        else:
            s = [float(l[i] @ e[j]) / t for j in range(m)]
        total += s[i] - (logsumexp(s) - math.log(m))
    return total / m


@pytest.mark.parametrize("form", ["paired", "standard"])
def test_batch_matches_loops(form):
    rng = np.random.default_rng(0)
    l, e = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
    got = contrastive_bound_batch(l, e, 0.7, form)
    for b in range(3):
        assert got[b] == pytest.approx(loop_bound(l[b], e[b], 0.7, form), abs=1e-12)


def test_independent_variables_standard_critic():
    rng = np.random.default_rng(0)
    joint = DiscreteJoint(np.outer(rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(4))))
    assert joint.mutual_information() == pytest.approx(0.0, abs=1e-12)
    rep = entropy_bound_check(joint, 8, 5, Critic(unit_rows(rng, 6, 4), unit_rows(rng, 4, 4)),
                              batches=400, seed=1, form="standard")
    assert rep.mean_estimate <= joint.entropy_x()
    assert not rep.violations.any()


def test_identity_joint_approaches_log_m():
    # X = Y uniform over n values; orthonormal l = e
    n, m = 64, 8
    joint = DiscreteJoint(np.eye(n) / n)
    l = np.eye(n)
    rep = entropy_bound_check(joint, m, 1, Critic(l, l, 0.05), batches=300, seed=0)
    assert rep.H_X == pytest.approx(math.log(n))
    assert rep.mean_estimate <= math.log(m) + 1e-9
    assert rep.mean_estimate > math.log(m) - 0.5


@pytest.mark.parametrize("m", [2, 8, 32])
def test_realistic_critics_respect_bound(m):
    rng = np.random.default_rng(m)
    for _ in range(5):
        joint = random_joint(rng, 6, 3)
        critic = Critic(unit_rows(rng, 6, 4), unit_rows(rng, 3, 4), 0.5)
        rep = entropy_bound_check(joint, m, 1, critic, batches=200, seed=int(rng.integers(1e9)))
        assert not rep.violations.any()


def test_paired_critic_can_exceed_entropy():
    # Constant X (H = 0): the diagonal score l.e/t dwarfs the off-diagonal
    # l.l/t, so the estimate sits near log M.  The paired critic is not one
    # function of (x, y), so the usual InfoNCE argument does not cover it.
    joint = DiscreteJoint(np.array([[0.5, 0.5]]))
    critic = Critic(np.full((1, 2), 0.5), np.full((2, 2), 10.0), 1.0)
    for m in (2, 8, 32):
        rep = entropy_bound_check(joint, m, 3, critic, batches=50, seed=0)
        assert rep.degenerate
        assert rep.mean_estimate == pytest.approx(math.log(m), abs=0.01)
        assert rep.violations.all()


def test_standard_form_on_same_counterexample_is_bounded():
    joint = DiscreteJoint(np.array([[0.5, 0.5]]))
    critic = Critic(np.full((1, 2), 0.5), np.full((2, 2), 10.0), 1.0)
    rep = entropy_bound_check(joint, 8, 3, critic, batches=50, seed=0, form="standard")
    assert rep.mean_estimate == pytest.approx(0.0, abs=1e-12)


def test_bound_check_input_validation():
    joint = random_joint(np.random.default_rng(0), 3, 2)
    critic = Critic(np.ones((3, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        entropy_bound_check(joint, 1, 1, critic)
    with pytest.raises(ValueError):
        entropy_bound_check(joint, 4, 1, Critic(np.ones((2, 2)), np.ones((2, 2))))
    with pytest.raises(ValueError):
        contrastive_bound_batch(np.ones((1, 2, 2)), np.ones((1, 2, 2)), 1.0, form="other")


def test_joint_validation_and_sampling():
    with pytest.raises(ValueError):
        DiscreteJoint(np.array([[0.5, 0.6]]))
    joint = DiscreteJoint(np.array([[0.1, 0.2], [0.3, 0.4]]))
    xs, ys = joint.sample(np.random.default_rng(0), (200_000,))
    freq = np.zeros((2, 2))
    np.add.at(freq, (xs, ys), 1)
    np.testing.assert_allclose(freq / freq.sum(), joint.table, atol=5e-3)
