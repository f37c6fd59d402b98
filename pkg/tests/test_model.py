"""Bayesian update calculus: failure probabilities, posteriors, keys."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertmatch.model import (
    KEY_TOTAL,
    FeedbackModel,
    MixedType,
    ScenarioError,
    SkillMatrix,
    UndefinedPosteriorError,
    canonical_key,
    failure_probability,
    feedback_probability,
    make_scenario,
    posterior_on_failure,
    posterior_with_feedback,
    pure_type,
    type_from_key,
    validate_scenario,
)

from conftest import random_simplex, random_skills

Z_PRIME = MixedType([0.5, 0.5])
Z_DOUBLE = MixedType([0.0, 1.0])


# -- MixedType / Scenario validation ---------------------------------------


def test_mixed_type_rejects_bad_vectors():
    with pytest.raises(ScenarioError):
        MixedType([0.6, 0.6])
    with pytest.raises(ScenarioError):
        MixedType([1.2, -0.2])
    with pytest.raises(ScenarioError):
        MixedType([])
    with pytest.raises(ScenarioError):
        MixedType([[0.5, 0.5]])


def test_mixed_type_tolerates_tiny_sum_drift():
    z = MixedType([0.5 + 4e-10, 0.5 - 2e-10])
    assert z.dim == 2


def test_pure_type_support():
    z = pure_type(2, 4)
    assert z.is_pure()
    assert list(z.support()) == [2]
    assert not Z_PRIME.is_pure()


def test_make_scenario_validates():
    good = dict(
        classes=("a", "b"),
        p=[[1.0, 0.5], [1.0, 0.0]],
        mu=[1.0, 1.0],
        lam=1.0,
        priors=[([0.5, 0.5], 1.0)],
    )
    make_scenario(**good)
    with pytest.raises(ScenarioError):
        make_scenario(**{**good, "p": [[1.0, 1.5], [1.0, 0.0]]})
    with pytest.raises(ScenarioError):
        make_scenario(**{**good, "mu": [1.0, 0.0]})
    with pytest.raises(ScenarioError):
        make_scenario(**{**good, "lam": -0.1})
    with pytest.raises(ScenarioError):
        make_scenario(**{**good, "priors": [([0.5, 0.5], 0.6)]})
    with pytest.raises(ScenarioError):
        make_scenario(**{**good, "priors": [([0.5, 0.5], -1.0), ([0.5, 0.5], 2.0)]})
    with pytest.raises(ScenarioError):
        make_scenario(**{**good, "priors": [([1.0, 0.0, 0.0], 1.0)]})


def test_feedback_model_rows_must_normalize():
    beta_ok = np.full((1, 2, 2), 0.5)
    scn = make_scenario(
        classes=("a", "b"),
        p=[[0.3, 0.4]],
        mu=[1.0],
        lam=0.5,
        priors=[([0.5, 0.5], 1.0)],
        feedback=(("f0", "f1"), beta_ok),
    )
    validate_scenario(scn)
    beta_bad = beta_ok.copy()
    beta_bad[0, 1] = [0.7, 0.6]
    with pytest.raises(ScenarioError):
        make_scenario(
            classes=("a", "b"),
            p=[[0.3, 0.4]],
            mu=[1.0],
            lam=0.5,
            priors=[([0.5, 0.5], 1.0)],
            feedback=(("f0", "f1"), beta_bad),
        )


# -- failure_probability ----------------------------------------------------


def test_failure_probability_pure_type():
    skills = SkillMatrix(p=np.array([[0.3, 0.8]]), mu=np.ones(1), labels=())
    assert failure_probability(skills, 0, pure_type(0, 2)) == pytest.approx(0.7)
    assert failure_probability(skills, 0, pure_type(1, 2)) == pytest.approx(0.2)


def test_failure_probability_asymmetric_values(asym05_skills):
    # a = 0.5: psi_s1(z') = 0.25, psi_s2(z') = 0.5, psi_s1(z'') = 0.5, psi_s2(z'') = 1
    assert failure_probability(asym05_skills, 0, Z_PRIME) == pytest.approx(0.25)
    assert failure_probability(asym05_skills, 1, Z_PRIME) == pytest.approx(0.5)
    assert failure_probability(asym05_skills, 0, Z_DOUBLE) == pytest.approx(0.5)
    assert failure_probability(asym05_skills, 1, Z_DOUBLE) == pytest.approx(1.0)


def test_failure_probability_matches_loop_oracle():
    rng = np.random.default_rng(42)
    skills = random_skills(rng, 3, 4)
    for _ in range(50):
        z = MixedType(random_simplex(rng, 4))
        for s in range(3):
            direct = sum(z.w[c] * (1.0 - skills.p[s, c]) for c in range(4))
            assert abs(failure_probability(skills, s, z) - direct) <= 1e-12


def test_failure_probability_dimension_mismatch(asym05_skills):
    with pytest.raises(ScenarioError):
        failure_probability(asym05_skills, 0, MixedType([1.0]))


# -- posterior_on_failure ---------------------------------------------------


def test_posterior_asymmetric_collapses(asym05_skills):
    for s in (0, 1):
        z = posterior_on_failure(asym05_skills, s, Z_PRIME)
        assert np.allclose(z.w, [0.0, 1.0], atol=1e-12)


def test_posterior_pure_type_fixed():
    skills = SkillMatrix(p=np.array([[0.4, 0.9]]), mu=np.ones(1), labels=())
    z = posterior_on_failure(skills, 0, pure_type(0, 2))
    assert np.allclose(z.w, [1.0, 0.0], atol=0)


def test_posterior_matches_normalization_oracle():
    rng = np.random.default_rng(7)
    skills = random_skills(rng, 2, 3)
    for _ in range(50):
        z = MixedType(random_simplex(rng, 3))
        for s in range(2):
            num = z.w * (1.0 - skills.p[s])
            expect = num / num.sum()
            got = posterior_on_failure(skills, s, z).w
            assert np.max(np.abs(got - expect)) <= 1e-12


def test_posterior_impossible_failure_raises():
    skills = SkillMatrix(p=np.array([[1.0, 1.0]]), mu=np.ones(1), labels=())
    with pytest.raises(UndefinedPosteriorError):
        posterior_on_failure(skills, 0, Z_PRIME)


def test_degenerate_server_is_identity():
    # p_{s,c} = 0 for all c: psi = 1 and the posterior is unchanged
    skills = SkillMatrix(p=np.zeros((1, 3)), mu=np.ones(1), labels=())
    z = MixedType([0.2, 0.3, 0.5])
    assert failure_probability(skills, 0, z) == 1.0
    assert np.allclose(posterior_on_failure(skills, 0, z).w, z.w, atol=1e-15)


# -- feedback ---------------------------------------------------------------


def _feedback_fixture():
    skills = SkillMatrix(p=np.array([[0.3, 0.6]]), mu=np.ones(1), labels=())
    beta = np.array([[[0.2, 0.8], [0.7, 0.3]]])
    return skills, FeedbackModel(symbols=("f0", "f1"), beta=beta)


def test_uninformative_feedback_reduces_to_plain_posterior():
    skills = SkillMatrix(p=np.array([[0.3, 0.6]]), mu=np.ones(1), labels=())
    beta = np.full((1, 2, 2), 0.5)
    fb = FeedbackModel(symbols=("f0", "f1"), beta=beta)
    z = MixedType([0.4, 0.6])
    plain = posterior_on_failure(skills, 0, z)
    for f in range(2):
        zf, xi = posterior_with_feedback(skills, fb, 0, z, f)
        assert np.max(np.abs(zf.w - plain.w)) <= 1e-12
        assert xi == pytest.approx(0.5 * failure_probability(skills, 0, z))


def test_fully_revealing_feedback_yields_pure_type():
    skills = SkillMatrix(p=np.array([[0.3, 0.6]]), mu=np.ones(1), labels=())
    beta = np.array([[[1.0, 0.0], [0.0, 1.0]]])  # symbol f identifies class f
    fb = FeedbackModel(symbols=("f0", "f1"), beta=beta)
    z = MixedType([0.4, 0.6])
    for c in range(2):
        zf, _ = posterior_with_feedback(skills, fb, 0, z, c)
        assert np.allclose(zf.w, np.eye(2)[c], atol=1e-12)


def test_feedback_matches_joint_table_oracle():
    skills, fb = _feedback_fixture()
    z = MixedType([0.45, 0.55])
    for f in range(2):
        joint = z.w * (1.0 - skills.p[0]) * fb.beta[0, :, f]
        xi_expect = joint.sum()
        zf, xi = posterior_with_feedback(skills, fb, 0, z, f)
        assert abs(xi - xi_expect) <= 1e-12
        assert np.max(np.abs(zf.w - joint / xi_expect)) <= 1e-12
        assert feedback_probability(skills, fb, 0, z, f) == pytest.approx(xi_expect)


def test_feedback_zero_probability_raises():
    skills = SkillMatrix(p=np.array([[1.0, 0.5]]), mu=np.ones(1), labels=())
    beta = np.array([[[1.0, 0.0], [1.0, 0.0]]])
    fb = FeedbackModel(symbols=("f0", "f1"), beta=beta)
    with pytest.raises(UndefinedPosteriorError):
        posterior_with_feedback(skills, fb, 0, MixedType([0.5, 0.5]), 1)


# -- canonical keys ----------------------------------------------------------


def test_canonical_key_one_hot():
    key = canonical_key(pure_type(1, 3))
    assert key == (0, KEY_TOTAL, 0)


def test_canonical_key_merges_sub_quantum_perturbations():
    z = MixedType([0.3, 0.7])
    w = np.array([0.3 + 1e-13, 0.7 - 1e-13])
    z2 = MixedType(w / w.sum())
    assert canonical_key(z) == canonical_key(z2)


def test_canonical_key_sums_to_total():
    rng = np.random.default_rng(3)
    for n in (2, 3, 7):
        for _ in range(200):
            key = canonical_key(MixedType(random_simplex(rng, n)))
            assert sum(key) == KEY_TOTAL
            assert all(v >= 0 for v in key)


def test_canonical_key_idempotent_through_representative():
    rng = np.random.default_rng(4)
    for _ in range(200):
        key = canonical_key(MixedType(random_simplex(rng, 4)))
        assert canonical_key(type_from_key(key)) == key


def test_commuted_double_posterior_same_key():
    rng = np.random.default_rng(11)
    skills = random_skills(rng, 2, 3)
    for _ in range(100):
        z = MixedType(random_simplex(rng, 3))
        ab = posterior_on_failure(skills, 1, posterior_on_failure(skills, 0, z))
        ba = posterior_on_failure(skills, 0, posterior_on_failure(skills, 1, z))
        assert canonical_key(ab) == canonical_key(ba)


# -- property suites ---------------------------------------------------------

simplex3 = st.lists(
    st.floats(min_value=1e-6, max_value=1.0, allow_nan=False), min_size=3, max_size=3
).map(lambda v: np.array(v) / np.sum(v))

prow = st.lists(
    st.floats(min_value=0.0, max_value=0.95, allow_nan=False), min_size=3, max_size=3
)


@settings(max_examples=300, deadline=None, derandomize=True)
@given(w=simplex3, p0=prow, p1=prow)
def test_posterior_commutativity_property(w, p0, p1):
    skills = SkillMatrix(p=np.array([p0, p1]), mu=np.ones(2), labels=())
    z = MixedType(w)
    ab = posterior_on_failure(skills, 1, posterior_on_failure(skills, 0, z))
    ba = posterior_on_failure(skills, 0, posterior_on_failure(skills, 1, z))
    assert np.max(np.abs(ab.w - ba.w)) <= 1e-10


@settings(max_examples=300, deadline=None, derandomize=True)
@given(w=simplex3, p0=prow)
def test_posterior_normalization_property(w, p0):
    skills = SkillMatrix(p=np.array([p0]), mu=np.ones(1), labels=())
    z = posterior_on_failure(skills, 0, MixedType(w))
    assert abs(float(z.w.sum()) - 1.0) <= 1e-9
    assert np.all(z.w >= 0.0)


@settings(max_examples=300, deadline=None, derandomize=True)
@given(
    w=simplex3,
    p0=prow,
    beta=st.lists(
        st.lists(st.floats(min_value=0.05, max_value=1.0), min_size=2, max_size=2),
        min_size=3,
        max_size=3,
    ),
)
def test_feedback_marginalization_property(w, p0, beta):
    b = np.array(beta)
    b = b / b.sum(axis=1, keepdims=True)
    skills = SkillMatrix(p=np.array([p0]), mu=np.ones(1), labels=())
    fb = FeedbackModel(symbols=("f0", "f1"), beta=b[None, :, :])
    z = MixedType(w)
    psi = failure_probability(skills, 0, z)
    total = sum(feedback_probability(skills, fb, 0, z, f) for f in range(2))
    assert abs(total - psi) <= 1e-10


@settings(max_examples=300, deadline=None, derandomize=True)
@given(w1=simplex3, w2=simplex3, p0=prow, alpha=st.floats(min_value=0.0, max_value=1.0))
def test_failure_probability_affine_property(w1, w2, p0, alpha):
    skills = SkillMatrix(p=np.array([p0]), mu=np.ones(1), labels=())
    mix = alpha * w1 + (1.0 - alpha) * w2
    lhs = failure_probability(skills, 0, MixedType(mix / mix.sum()))
    rhs = alpha * failure_probability(skills, 0, MixedType(w1)) + (
        1.0 - alpha
    ) * failure_probability(skills, 0, MixedType(w2))
    assert abs(lhs - rhs) <= 1e-12
