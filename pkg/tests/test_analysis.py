"""Closed-form thresholds, type graph, flow LP, Y-set construction, planner."""

import itertools

import numpy as np
import pytest

from expertmatch.analysis import (
    ESCAPES,
    NO_EDGE,
    TruncationError,
    UnservableClassError,
    asymmetric_thresholds,
    build_type_graph,
    construct_y_set,
    lp_feasible,
    max_stable_rate,
    plan_single_task,
    random_policy_threshold,
)
from expertmatch.model import (
    MixedType,
    SkillMatrix,
    canonical_key,
    failure_probability,
    make_scenario,
    posterior_on_failure,
    type_from_key,
)
from expertmatch.scenarios import asymmetric_scenario, bundled_scenario

from conftest import random_simplex, random_skills


# -- closed-form thresholds ----------------------------------------------------


def quadratic_np_bound(a: float) -> float:
    # positive root of lam^2 (8/a + 1) + lam (8/a - 14) - 16 = 0, via np.roots
    roots = np.roots([8.0 / a + 1.0, 8.0 / a - 14.0, -16.0])
    pos = [r.real for r in roots if abs(r.imag) < 1e-12 and r.real > 0]
    assert len(pos) == 1
    return pos[0]


@pytest.mark.parametrize(
    "a, optimal, random_thr, known",
    [
        (0.2, 0.4, 4.0 / 11.0, 0.4),
        (0.5, 1.0, 0.8, 1.0),
        (0.8, 4.0 / 3.0, 8.0 / 7.0, 1.6),
        (1.0, 1.5, 4.0 / 3.0, 2.0),
    ],
)
def test_thresholds_frozen_table(a, optimal, random_thr, known):
    thr = asymmetric_thresholds(a)
    assert thr["optimal"] == pytest.approx(optimal, abs=1e-12)
    assert thr["random"] == pytest.approx(random_thr, abs=1e-12)
    assert thr["preemptive_greedy"] == pytest.approx(random_thr, abs=1e-12)
    assert thr["known_type"] == pytest.approx(known, abs=1e-12)
    assert thr["nonpreemptive_instability_bound"] == pytest.approx(
        quadratic_np_bound(a), abs=1e-10
    )


def test_np_bound_half_closed_form():
    # a = 1/2: root simplifies to (-1 + sqrt(273)) / 17
    thr = asymmetric_thresholds(0.5)
    exact = (-1.0 + np.sqrt(273.0)) / 17.0
    assert thr["nonpreemptive_instability_bound"] == pytest.approx(exact, abs=1e-14)
    assert thr["nonpreemptive_instability_bound"] == pytest.approx(
        0.9131006848151944, abs=1e-15
    )


def test_np_bound_positive_and_below_optimal_at_half():
    for a in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
        assert asymmetric_thresholds(a)["nonpreemptive_instability_bound"] > 0
    # the a = 1/2 instance separates the policies: the non-preemptive bound
    # sits strictly below the optimal rate, above the random rate
    thr = asymmetric_thresholds(0.5)
    assert thr["random"] < thr["nonpreemptive_instability_bound"] < thr["optimal"]


@pytest.mark.parametrize("a", [0.0, -0.2, 1.2])
def test_thresholds_domain(a):
    with pytest.raises(ValueError):
        asymmetric_thresholds(a)


# -- random-policy formula -----------------------------------------------------


def test_random_threshold_asymmetric_exact(asym05):
    assert random_policy_threshold(asym05) == 0.8


def test_random_threshold_matches_closed_form_grid():
    for a in (0.1, 0.25, 0.5, 0.75, 1.0):
        scn = asymmetric_scenario(a)
        assert random_policy_threshold(scn) == pytest.approx(
            4.0 * a / (2.0 + a), abs=1e-12
        )


def test_random_threshold_hand_example():
    # two classes, mean weights (0.3, 0.7), capacities 1.5 and 0.4:
    # 1 / (0.3/1.5 + 0.7/0.4) = 1 / 1.95
    scn = make_scenario(
        classes=("x", "y"),
        p=[[1.0, 0.4], [0.5, 0.0]],
        mu=[1.0, 1.0],
        lam=0.1,
        priors=[([0.3, 0.7], 1.0)],
    )
    assert random_policy_threshold(scn) == pytest.approx(1.0 / 1.95, abs=1e-12)


def test_random_threshold_ignores_zero_mass_class():
    scn = make_scenario(
        classes=("x", "y"),
        p=[[0.5, 0.0]],  # class y unservable but never arrives
        mu=[1.0],
        lam=0.1,
        priors=[([1.0, 0.0], 1.0)],
    )
    assert random_policy_threshold(scn) == pytest.approx(0.5)


def test_random_threshold_unservable_class():
    scn = make_scenario(
        classes=("x", "y"),
        p=[[0.5, 0.0]],
        mu=[1.0],
        lam=0.1,
        priors=[([0.5, 0.5], 1.0)],
    )
    with pytest.raises(UnservableClassError):
        random_policy_threshold(scn)


def test_random_threshold_mathse_frozen():
    ms = bundled_scenario("mathse")
    assert random_policy_threshold(ms) == pytest.approx(2.2112430679, abs=1e-9)


# -- type graph ------------------------------------------------------------------


def test_type_graph_asymmetric_depth1(asym05):
    g = build_type_graph(asym05, 1)
    assert g.n_nodes == 2
    assert g.residual_rate == 0.0
    assert g.expanded.all()
    prior_key = canonical_key(asym05.priors[0][0])
    hard_key = canonical_key(MixedType([0.0, 1.0]))
    assert g.keys == [prior_key, hard_key]
    assert g.pi.tolist() == [1.0, 0.0]
    assert g.depth.tolist() == [0, 1]
    i_hard = g.index[hard_key]
    # both failure edges of the prior land on the hard type; it self-loops
    assert g.succ[0].tolist() == [i_hard, i_hard]
    assert g.succ[i_hard].tolist() == [i_hard, i_hard]
    np.testing.assert_allclose(g.psi[0], [0.25, 0.5])
    np.testing.assert_allclose(g.psi[1], [0.5, 1.0])


def test_type_graph_saturates(asym05):
    # the asymmetric system only ever visits two beliefs
    assert build_type_graph(asym05, 6).n_nodes == 2


def test_type_graph_depth0_frontier(asym05):
    g = build_type_graph(asym05, 0)
    assert g.n_nodes == 1
    assert not g.expanded[0]
    assert (g.succ[0] == ESCAPES).all()
    assert g.residual_rate > 0.0
    assert g.frontier().tolist() == [0]


def test_type_graph_pure_prior_exact():
    scn = make_scenario(
        classes=("only",),
        p=[[0.6]],
        mu=[1.0],
        lam=0.5,
        priors=[([1.0], 1.0)],
    )
    g = build_type_graph(scn, 0)
    # a pure type is its own failure posterior: self-loop, nothing escapes
    assert g.n_nodes == 1
    assert g.expanded[0]
    assert g.succ[0, 0] == 0
    assert g.residual_rate == 0.0


def test_type_graph_no_edge_on_certain_success():
    scn = make_scenario(
        classes=("easy", "hard"),
        p=[[1.0, 1.0], [1.0, 0.5]],
        mu=[1.0, 1.0],
        lam=0.5,
        priors=[([0.5, 0.5], 1.0)],
    )
    g = build_type_graph(scn, 3)
    assert g.succ[0, 0] == NO_EDGE  # server 0 never fails, no posterior edge
    assert g.succ[0, 1] >= 0


def test_type_graph_truncation_error(asym05):
    with pytest.raises(TruncationError):
        build_type_graph(asym05, 1, max_nodes=1)


def test_type_graph_validates_args(asym05):
    with pytest.raises(ValueError):
        build_type_graph(asym05, -1)
    with pytest.raises(ValueError):
        build_type_graph(asym05, 1, max_nodes=0)


def snapped_closure(scn, max_depth):
    """Oracle: BFS over per-step key-snapped failure walks from the priors.

    Mirrors the registry recursion: each step reads the belief back off the
    quantization grid before the next posterior. Returns key -> BFS depth.
    """
    depth = {}
    frontier = []
    for z, _ in scn.priors:
        k = canonical_key(z)
        if k not in depth:
            depth[k] = 0
            frontier.append(k)
    for d in range(max_depth):
        nxt = []
        for k in frontier:
            z = type_from_key(k)
            for s in range(scn.n_servers):
                if failure_probability(scn.skills, s, z) <= 0.0:
                    continue
                k2 = canonical_key(posterior_on_failure(scn.skills, s, z))
                if k2 not in depth:
                    depth[k2] = d + 1
                    nxt.append(k2)
        frontier = nxt
    return depth


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_type_graph_matches_enumeration_oracle(seed):
    rng = np.random.default_rng(701 + seed)
    n, m, depth = 3, 2, 3
    scn = make_scenario(
        classes=tuple(f"c{i}" for i in range(n)),
        p=random_skills(rng, m, n).p,
        mu=[1.0] * m,
        lam=0.7,
        priors=[(random_simplex(rng, n), 0.5), (random_simplex(rng, n), 0.5)],
    )
    g = build_type_graph(scn, depth)
    oracle = snapped_closure(scn, depth)
    assert set(g.keys) == set(oracle)
    for i, k in enumerate(g.keys):
        assert g.depth[i] == oracle[k]
    # interior nodes fully expanded, with successors inside the oracle set
    for i in range(g.n_nodes):
        if g.depth[i] < depth:
            assert g.expanded[i]
            for s in range(m):
                j = g.succ[i, s]
                assert j != ESCAPES
                if j >= 0:
                    z = g.node_type(i)
                    k2 = canonical_key(posterior_on_failure(scn.skills, s, z))
                    assert g.keys[j] == k2


def test_type_graph_psi_matches_model():
    rng = np.random.default_rng(99)
    scn = make_scenario(
        classes=("a", "b", "c"),
        p=random_skills(rng, 2, 3).p,
        mu=[1.0, 1.0],
        lam=0.5,
        priors=[(random_simplex(rng, 3), 1.0)],
    )
    g = build_type_graph(scn, 2)
    for i in range(g.n_nodes):
        z = g.node_type(i)
        for s in range(2):
            assert g.psi[i, s] == pytest.approx(
                failure_probability(scn.skills, s, z), abs=1e-12
            )


# -- flow LP ---------------------------------------------------------------------


def test_lp_feasible_below_threshold(asym05):
    g = build_type_graph(asym05, 1)
    sol = lp_feasible(g, asym05.skills, 0.9)
    assert sol.feasible
    assert sol.status == "optimal"
    assert sol.t_star == pytest.approx(0.1, abs=1e-8)
    assert sol.residual_ok and sol.residual_flow == 0.0
    assert min(sol.slack.values()) >= sol.min_slack


def test_lp_infeasible_above_threshold(asym05):
    g = build_type_graph(asym05, 1)
    sol = lp_feasible(g, asym05.skills, 1.05)
    assert not sol.feasible
    assert sol.status == "infeasible"
    assert sol.nu == {}


def test_lp_zero_rate_trivially_feasible(asym05):
    g = build_type_graph(asym05, 1)
    assert lp_feasible(g, asym05.skills, 0.0).feasible


def test_lp_validates_args(asym05):
    g = build_type_graph(asym05, 1)
    with pytest.raises(ValueError):
        lp_feasible(g, asym05.skills, -0.1)
    with pytest.raises(ValueError):
        lp_feasible(g, asym05.skills, 0.5, min_slack=0.0)


def test_lp_solution_conserves_flow(asym05):
    """Reconstructed nu satisfies the balance equations node by node."""
    lam = 0.95
    g = build_type_graph(asym05, 1)
    sol = lp_feasible(g, asym05.skills, lam)
    assert sol.feasible
    n, m = g.n_nodes, asym05.n_servers
    nu = np.zeros((m, n))
    for (s, key), v in sol.nu.items():
        nu[s, g.index[key]] = v
    for i in range(n):
        inflow = lam * g.pi[i]
        for j in range(n):
            for s in range(m):
                if g.succ[j, s] == i and j != i:
                    inflow += g.psi[j, s] * nu[s, j]
        outflow = sum(
            nu[s, i] * (1.0 - (g.psi[i, s] if g.succ[i, s] == i else 0.0))
            for s in range(m)
        )
        assert inflow == pytest.approx(outflow, abs=1e-6)


def test_lp_capacity_respected(asym05):
    g = build_type_graph(asym05, 1)
    sol = lp_feasible(g, asym05.skills, 0.85)
    assert sol.feasible
    load = {s: 0.0 for s in range(asym05.n_servers)}
    for (s, _), v in sol.nu.items():
        load[s] += v
    for s, mu_s in enumerate(asym05.skills.mu):
        assert load[s] + sol.slack[s] <= mu_s + 1e-9


@pytest.mark.filterwarnings("ignore:type-graph residual_rate")
def test_lp_residual_budget_blocks_leaky_truncation(asym05):
    # depth-0 graph leaks all failures; the budget admits only small lam
    g = build_type_graph(asym05, 0)
    assert g.residual_rate > 0.0
    hi = lp_feasible(g, asym05.skills, 0.9)
    lo = lp_feasible(g, asym05.skills, 0.1)
    assert not hi.feasible
    assert lo.feasible
    assert lo.residual_flow > 0.0


def test_lp_warns_when_residual_large(asym05):
    g = build_type_graph(asym05, 0)
    with pytest.warns(UserWarning, match="residual_rate"):
        lp_feasible(g, asym05.skills, 0.5)


# -- max stable rate ---------------------------------------------------------------


@pytest.mark.parametrize("a", [0.2, 0.5, 0.8])
def test_max_stable_rate_matches_optimal_threshold(a):
    scn = asymmetric_scenario(a)
    target = min(3.0 * a / (a + 1.0), 2.0 * a)
    assert max_stable_rate(scn) == pytest.approx(target, abs=1e-3)


def test_max_stable_rate_single_server_capacity():
    scn = make_scenario(
        classes=("only",), p=[[1.0]], mu=[2.0], lam=0.5, priors=[([1.0], 1.0)]
    )
    assert max_stable_rate(scn) == pytest.approx(2.0, abs=1e-3)


def test_max_stable_rate_accepts_prebuilt_graph(asym05):
    g = build_type_graph(asym05, 2)
    assert max_stable_rate(asym05, graph=g) == pytest.approx(1.0, abs=1e-3)


def test_max_stable_rate_validates_tol(asym05):
    with pytest.raises(ValueError):
        max_stable_rate(asym05, tol=0.0)


# -- Y-set construction -------------------------------------------------------------


def test_y_set_asymmetric_depths(asym05):
    prior_key = canonical_key(asym05.priors[0][0])
    hard_key = canonical_key(MixedType([0.0, 1.0]))
    assert construct_y_set(asym05, 0) == [prior_key]
    assert construct_y_set(asym05, 1) == [prior_key, hard_key]
    assert construct_y_set(asym05, 5) == [prior_key, hard_key]


def test_y_set_mathse_size():
    ms = bundled_scenario("mathse")
    ys = construct_y_set(ms, 1)
    assert len(ys) == 66
    assert len(set(ys)) == 66
    # the 16 prior keys come first, in scenario order
    prior_keys = []
    for z, _ in ms.priors:
        k = canonical_key(z)
        if k not in prior_keys:
            prior_keys.append(k)
    assert ys[: len(prior_keys)] == prior_keys


def test_y_set_downward_closed():
    """Every non-pure member's failure posteriors at depth < d stay inside."""
    ms = bundled_scenario("mathse")
    for d in (0, 1):
        inner = set(construct_y_set(ms, d))
        outer = set(construct_y_set(ms, d + 1))
        assert inner <= outer
    ys2 = construct_y_set(ms, 2)
    seen = set(ys2)
    closure = snapped_closure(ms, 2)
    assert seen == set(closure)


def test_y_set_pure_priors_not_expanded():
    scn = make_scenario(
        classes=("a", "b"),
        p=[[0.5, 0.5]],
        mu=[1.0],
        lam=0.1,
        priors=[([1.0, 0.0], 0.5), ([0.0, 1.0], 0.5)],
    )
    ys = construct_y_set(scn, 4)
    assert len(ys) == 2


def test_y_set_negative_depth(asym05):
    with pytest.raises(ValueError):
        construct_y_set(asym05, -1)


# -- single-task planner ---------------------------------------------------------


def test_plan_asymmetric_tau1(asym05):
    seq, g = plan_single_task(asym05.skills, asym05.priors[0][0], 1)
    assert seq == (0, 0)
    assert g == pytest.approx(0.875, abs=1e-12)


def test_plan_tau0_picks_best_single_attempt(asym05):
    seq, g = plan_single_task(asym05.skills, asym05.priors[0][0], 0)
    assert seq == (0,)
    assert g == pytest.approx(0.75)


def test_plan_truncates_on_certain_success():
    skills = SkillMatrix(
        p=np.array([[1.0, 1.0], [0.5, 0.5]]),
        mu=np.array([1.0, 1.0]),
        labels=("sure", "coin"),
    )
    seq, g = plan_single_task(skills, MixedType([0.5, 0.5]), 5)
    assert seq == (0,)
    assert g == 1.0


def test_plan_negative_tau(asym05):
    with pytest.raises(ValueError):
        plan_single_task(asym05.skills, asym05.priors[0][0], -1)


def exact_sequence_success(skills, z0, seq):
    """Exact success probability of an attempt sequence, no quantization."""
    w = np.array(z0.w, dtype=float)
    fail_products = 1.0
    for s in seq:
        psi = float((1.0 - skills.p[s]) @ w) / float(w.sum())
        fail_products *= psi
        if psi <= 0.0:
            return 1.0
        w = w * (1.0 - skills.p[s])
    return 1.0 - fail_products


def test_plan_competitive_ratio_exhaustive():
    """Greedy g is within 1 - 1/e of the best sequence on 200 random instances."""
    rng = np.random.default_rng(4242)
    bound = 1.0 - 1.0 / np.e
    for _ in range(200):
        m = int(rng.integers(1, 4))
        n = int(rng.integers(2, 4))
        tau = int(rng.integers(0, 4))
        skills = SkillMatrix(
            p=random_skills(rng, m, n).p,
            mu=np.ones(m),
            labels=tuple(f"s{i}" for i in range(m)),
        )
        z0 = MixedType(random_simplex(rng, n))
        _, g = plan_single_task(skills, z0, tau)
        best = max(
            exact_sequence_success(skills, z0, seq)
            for seq in itertools.product(range(m), repeat=tau + 1)
        )
        assert g <= best + 1e-9
        assert g >= bound * best - 1e-9
