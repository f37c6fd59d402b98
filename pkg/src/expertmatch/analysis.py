"""Analytic stability machinery.

Closed-form thresholds for the two-class benchmark, the Random-policy
formula, a truncated belief-type graph, the flow LP whose feasibility
characterizes the stability region, bisection for the maximum stable rate,
belief-set construction for the bookkeeping policies, and the greedy
single-task planner.

All graph and LP computations use the marginal failure model (psi, and the
failure posterior); scenarios with a feedback model are analyzed on that
marginal, which has the same per-attempt success probabilities.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .model import (
    MixedType,
    Scenario,
    SkillMatrix,
    canonical_key,
    failure_probability,
    posterior_on_failure,
    type_from_key,
)

# succ sentinels: >= 0 child node, SELF handled as own id
NO_EDGE = -1  # psi = 0, attempts always succeed
ESCAPES = -2  # successor outside the truncated graph


class UnservableClassError(ValueError):
    """A class with positive arrival mass has zero aggregate service capacity."""


class TruncationError(RuntimeError):
    """Type-graph expansion exceeded its node budget."""


class SolverError(RuntimeError):
    """The LP solver returned an unusable status."""


def asymmetric_thresholds(a: float) -> dict:
    """Closed-form critical rates of the two-class/two-server benchmark.

    Returns optimal, random, preemptive_greedy, known_type thresholds and the
    nonpreemptive_instability_bound (an upper bound on the non-preemptive
    greedy critical rate, not a critical rate itself: the policy is provably
    unstable above it).
    """
    if not 0.0 < a <= 1.0:
        raise ValueError(f"a must lie in (0, 1], got {a}")
    optimal = min(3.0 * a / (a + 1.0), 2.0 * a)
    random_thr = 4.0 * a / (2.0 + a)
    # positive root of lam^2 (8/a + 1) + lam (8/a - 14) - 16 = 0
    qa = 8.0 / a + 1.0
    qb = 8.0 / a - 14.0
    root = (-qb + np.sqrt(qb * qb + 64.0 * qa)) / (2.0 * qa)
    return {
        "optimal": optimal,
        "random": random_thr,
        "preemptive_greedy": random_thr,
        "nonpreemptive_instability_bound": float(root),
        "known_type": 2.0 * a,
    }


def random_policy_threshold(scn: Scenario) -> float:
    """Critical rate of the Random policy: (sum_c m_c / cap_c)^-1.

    m_c is the mean arriving weight of class c and cap_c its aggregate
    service capacity. Classes with zero arriving mass contribute nothing;
    a class with positive mass and zero capacity makes congestion infinite.
    """
    m = np.zeros(scn.n_classes)
    for z, q in scn.priors:
        m += q * z.w
    total = 0.0
    for c in range(scn.n_classes):
        if m[c] <= 0.0:
            continue
        cap = scn.class_capacity(c)
        if cap <= 0.0:
            raise UnservableClassError(
                f"class {scn.classes[c]!r} has arrival mass {m[c]:.6g} "
                "but zero service capacity"
            )
        total += m[c] / cap
    return 1.0 / total


@dataclass
class TypeGraph:
    """Truncated graph of reachable belief types.

    Nodes are canonical keys; edges follow the failure posterior of each
    server. succ[i, s] is the successor node id, NO_EDGE when psi is zero,
    or ESCAPES when the successor lies outside the truncation. bound[i] is a
    routing-agnostic upper bound on the flow rate into node i (diagnostic);
    residual_rate bounds the rate at which flow can leave the truncation.
    """

    keys: list
    index: dict
    psi: np.ndarray  # (nodes, servers)
    succ: np.ndarray  # (nodes, servers) int
    depth: np.ndarray
    pi: np.ndarray
    bound: np.ndarray
    expanded: np.ndarray  # bool: all successors resolved inside the graph
    residual_rate: float
    lam_ref: float

    @property
    def n_nodes(self) -> int:
        return len(self.keys)

    def node_type(self, i: int) -> MixedType:
        return type_from_key(self.keys[i])

    def frontier(self) -> np.ndarray:
        return np.flatnonzero(~self.expanded)


def build_type_graph(
    scn: Scenario,
    max_depth: int,
    residual_target: float = 0.0,
    max_nodes: int = 20000,
) -> TypeGraph:
    """Best-first expansion of the reachable belief types from the priors.

    Nodes at depth < max_depth are fully expanded. A node is also left
    unexpanded early when its inflow bound drops below residual_target
    spread over the current frontier. Nodes at max_depth only resolve their
    self-loops (a pure type is its own posterior, so pure frontiers carry no
    escaping flow); everything else at the frontier is marked ESCAPES.

    Expansion recurses on key representatives (each node's weights are read
    back off the quantization grid), the same walk the simulation registry
    performs, so node keys here match registry keys bitwise. Posterior
    composition commutes exactly, and attempt orders that land on the same
    key merge into one node; per-step quantization can split an exact merge
    onto adjacent grid points, which costs a few near-duplicate nodes but
    never drops flow.
    """
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    skills = scn.skills
    m = scn.n_servers
    one_minus_p = 1.0 - skills.p
    lam_ref = max(scn.lam, scn.total_rate())
    bound_cap = lam_ref + scn.total_rate()

    keys: list = []
    index: dict = {}
    types: list = []
    psi_rows: list = []
    depth: list = []
    pi: list = []
    bound: list = []
    propagated: list = []

    def add_node(key, d: int) -> int:
        i = index.get(key)
        if i is not None:
            if d < depth[i]:
                # best-first order is not level order: a node first found deep
                # may be re-reached shallower; requeue so it can expand
                depth[i] = d
                push(i)
            return i
        if len(keys) >= max_nodes:
            raise TruncationError(
                f"type graph exceeded {max_nodes} nodes at depth {d} "
                f"({len(keys)} discovered); raise max_nodes or lower max_depth"
            )
        i = len(keys)
        index[key] = i
        keys.append(key)
        z = type_from_key(key)
        types.append(z)
        psi_rows.append(one_minus_p @ z.w)
        depth.append(d)
        pi.append(0.0)
        bound.append(0.0)
        propagated.append(0.0)
        return i

    heap: list = []
    counter = 0

    def push(i: int):
        nonlocal counter
        heapq.heappush(heap, (-bound[i], counter, i))
        counter += 1

    for z, q in scn.priors:
        i = add_node(canonical_key(z), 0)
        pi[i] += q
        bound[i] = min(bound[i] + lam_ref * q, bound_cap)
    for i in range(len(keys)):
        push(i)

    succ_rows: dict = {}
    n_expanded = 0

    def expand(i: int):
        nonlocal n_expanded
        row = np.full(m, NO_EDGE, dtype=np.int64)
        b = bound[i]
        for s in range(m):
            if psi_rows[i][s] <= 0.0:
                continue
            num = types[i].w * one_minus_p[s]
            child_key = canonical_key(MixedType(num / num.sum(), _trusted=True))
            j = add_node(child_key, depth[i] + 1)
            row[s] = j
            if j != i:
                inc = b * float(psi_rows[i][s])
                if inc > 0.0:
                    bound[j] = min(bound[j] + inc, bound_cap)
                    push(j)
        succ_rows[i] = row
        propagated[i] = b
        n_expanded += 1

    while heap:
        neg_b, _, i = heapq.heappop(heap)
        if -neg_b != bound[i]:
            continue  # stale entry; a fresher one is queued
        if i in succ_rows:
            # bound grew after expansion: forward the delta to children
            delta = bound[i] - propagated[i]
            if delta > 1e-12:
                for s, j in enumerate(succ_rows[i]):
                    if j >= 0 and j != i:
                        inc = delta * float(psi_rows[i][s])
                        if inc > 0.0:
                            bound[j] = min(bound[j] + inc, bound_cap)
                            push(j)
                propagated[i] = bound[i]
            continue
        if depth[i] >= max_depth:
            continue
        if residual_target > 0.0:
            n_frontier = len(keys) - n_expanded
            if bound[i] < residual_target / max(1, n_frontier):
                continue
        expand(i)

    n = len(keys)
    succ = np.full((n, m), NO_EDGE, dtype=np.int64)
    expanded = np.zeros(n, dtype=bool)
    for i, row in succ_rows.items():
        succ[i] = row
        expanded[i] = True
    # frontier nodes resolve self-loops only; other failure edges escape
    residual = 0.0
    for i in range(n):
        if expanded[i]:
            continue
        own = keys[i]
        worst = 0.0
        resolved = True
        for s in range(m):
            ps = float(psi_rows[i][s])
            if ps <= 0.0:
                continue
            num = types[i].w * one_minus_p[s]
            child_key = canonical_key(MixedType(num / num.sum(), _trusted=True))
            if child_key == own:
                succ[i, s] = i
            else:
                succ[i, s] = ESCAPES
                resolved = False
                if ps > worst:
                    worst = ps
        if resolved:
            expanded[i] = True
        else:
            residual += bound[i] * worst

    return TypeGraph(
        keys=keys,
        index=index,
        psi=np.array(psi_rows),
        succ=succ,
        depth=np.array(depth, dtype=np.int64),
        pi=np.array(pi),
        bound=np.array(bound),
        expanded=expanded,
        residual_rate=float(residual),
        lam_ref=lam_ref,
    )


@dataclass
class FlowSolution:
    feasible: bool
    t_star: float
    min_slack: float
    nu: dict  # (server, CanonicalKey) -> rate
    slack: dict  # server -> delta_s
    residual_flow: float  # flow escaping the truncation under this solution
    residual_ok: bool
    status: str


def lp_feasible(
    graph: TypeGraph, skills: SkillMatrix, lam: float, min_slack: float = 1e-6
) -> FlowSolution:
    """Feasibility of the stability flow LP at arrival rate lam.

    Variables: attempt rates nu[s, z] per server and node, slack delta_s per
    server, and t. Constraints: flow conservation at every node (arrivals
    lam*pi_z plus failure inflow equal total attempt outflow), capacity
    sum_z nu[s, z] + delta_s <= mu_s, and a frontier budget: flow escaping
    the truncation must fit within min_c sum_s (delta_s/4) p_{s,c}, the rate
    at which reserved capacity can clear it regardless of class. Phase-1
    objective maximizes t = min_s delta_s; the system is declared feasible
    when t* >= min_slack, so every slack is strictly positive.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if min_slack <= 0:
        raise ValueError("min_slack must be positive")
    mu = skills.mu
    p = skills.p
    m, n_classes = p.shape
    n = graph.n_nodes
    if not np.any(p.min(axis=1) > 0.0):
        warnings.warn(
            "no server has strictly positive skill on every class; the "
            "feasibility characterization is conjectured but not proven "
            "in this regime",
            stacklevel=2,
        )
    k_min = float(min(mu @ p[:, c] for c in range(n_classes)))
    residual_ok = graph.residual_rate <= 0.25 * k_min
    if not residual_ok:
        warnings.warn(
            f"type-graph residual_rate {graph.residual_rate:.3g} exceeds a "
            f"quarter of the weakest class capacity {k_min:.3g}; the LP "
            "lower bound may be far below the true stability region",
            stacklevel=2,
        )

    # variable layout: nu[s, i] at s * n + i, then delta (m), then t
    nv = m * n
    n_vars = nv + m + 1

    rows: list = []
    cols: list = []
    vals: list = []

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    # conservation rows 0..n-1: -outflow + inflow = -lam * pi
    for i in range(n):
        for s in range(m):
            put(i, s * n + i, -1.0)
    for i in range(n):
        for s in range(m):
            j = graph.succ[i, s]
            if j >= 0:
                put(int(j), s * n + i, float(graph.psi[i, s]))
    a_eq = sparse.coo_matrix(
        (vals, (rows, cols)), shape=(n, n_vars)
    ).tocsr()
    b_eq = -lam * graph.pi

    rows, cols, vals = [], [], []
    # capacity rows 0..m-1: sum_i nu[s,i] + delta_s <= mu_s
    for s in range(m):
        for i in range(n):
            put(s, s * n + i, 1.0)
        put(s, nv + s, 1.0)
    # frontier budget rows m..m+n_classes-1
    esc = [
        (s, i, float(graph.psi[i, s]))
        for i in range(n)
        for s in range(m)
        if graph.succ[i, s] == ESCAPES
    ]
    for c in range(n_classes):
        r = m + c
        for s, i, ps in esc:
            put(r, s * n + i, ps)
        for s in range(m):
            put(r, nv + s, -0.25 * float(p[s, c]))
    # epigraph rows: t - delta_s <= 0
    for s in range(m):
        r = m + n_classes + s
        put(r, nv + m, 1.0)
        put(r, nv + s, -1.0)
    a_ub = sparse.coo_matrix(
        (vals, (rows, cols)), shape=(m + n_classes + m, n_vars)
    ).tocsr()
    b_ub = np.concatenate([mu, np.zeros(n_classes), np.zeros(m)])

    c_obj = np.zeros(n_vars)
    c_obj[-1] = -1.0
    res = linprog(
        c_obj,
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=[(0, None)] * n_vars,
        method="highs",
    )
    if res.status == 2:
        return FlowSolution(
            feasible=False,
            t_star=0.0,
            min_slack=min_slack,
            nu={},
            slack={},
            residual_flow=0.0,
            residual_ok=residual_ok,
            status="infeasible",
        )
    if res.status != 0:
        raise SolverError(f"LP solver status {res.status}: {res.message}")
    x = res.x
    t_star = float(x[-1])
    feasible = t_star >= min_slack
    nu = {}
    for s in range(m):
        base = s * n
        for i in range(n):
            v = float(x[base + i])
            if v > 1e-12:
                nu[(s, graph.keys[i])] = v
    slack = {s: float(x[nv + s]) for s in range(m)}
    residual_flow = float(sum(ps * x[s * n + i] for s, i, ps in esc))
    return FlowSolution(
        feasible=feasible,
        t_star=t_star,
        min_slack=min_slack,
        nu=nu,
        slack=slack,
        residual_flow=residual_flow,
        residual_ok=residual_ok,
        status="optimal",
    )


def max_stable_rate(
    scn: Scenario,
    max_depth: int = 8,
    residual_target: float = 0.0,
    max_nodes: int = 20000,
    min_slack: float = 1e-6,
    tol: float = 1e-3,
    graph: Optional[TypeGraph] = None,
) -> float:
    """Supremum arrival rate with a feasible stability LP, within tol.

    Bisection over [0, total service rate]; the graph is built once (with a
    reference rate at the bracket top) and reused, so the result is a sound
    lower bound on the true stability frontier for the truncated graph.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if graph is None:
        graph = build_type_graph(
            scn, max_depth, residual_target=residual_target, max_nodes=max_nodes
        )
    skills = scn.skills
    hi = scn.total_rate()
    if lp_feasible(graph, skills, hi, min_slack).feasible:
        return hi
    lo = 0.0
    # resolve to a quarter of the advertised tolerance so the reported value
    # sits well inside +-tol of the true supremum
    while hi - lo > 0.25 * tol:
        mid = 0.5 * (lo + hi)
        if lp_feasible(graph, skills, mid, min_slack).feasible:
            lo = mid
        else:
            hi = mid
    return lo


def construct_y_set(scn: Scenario, depth: int) -> list:
    """Keys of the prior support plus <= depth posterior steps from non-pure priors.

    Pure types are their own posteriors, so they appear once and are never
    expanded. Order: priors first (in scenario order), then discovered
    posteriors level by level in (prior, server) order. Expansion walks on
    key representatives, the same recursion the simulation registry uses, so
    membership tests against live states compare identical keys.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    skills = scn.skills
    seen = set()
    keys = []
    level = []
    for z, _ in scn.priors:
        k = canonical_key(z)
        if k not in seen:
            seen.add(k)
            keys.append(k)
            zk = type_from_key(k)
            if not zk.is_pure():
                level.append(zk)
    for _ in range(depth):
        nxt = []
        for z in level:
            for s in range(scn.n_servers):
                if failure_probability(skills, s, z) <= 0.0:
                    continue
                k2 = canonical_key(posterior_on_failure(skills, s, z))
                if k2 not in seen:
                    seen.add(k2)
                    keys.append(k2)
                    z2 = type_from_key(k2)
                    if not z2.is_pure():
                        nxt.append(z2)
        level = nxt
    return keys


def plan_single_task(skills: SkillMatrix, z0: MixedType, tau: int):
    """Greedy attempt plan for one task over tau+1 steps.

    At each step the server with the smallest failure probability on the
    current belief is chosen (lowest index on ties) and the belief updated
    by its failure posterior. Returns the server sequence and the exact
    success probability g = 1 - prod psi. A zero psi resolves the task with
    certainty; the sequence truncates there with g = 1.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    seq = []
    fail = 1.0
    z = z0
    for _ in range(tau + 1):
        psis = (1.0 - skills.p) @ z.w
        s = int(np.argmin(psis))
        seq.append(s)
        fail *= float(psis[s])
        if psis[s] <= 0.0:
            fail = 0.0
            break
        z = posterior_on_failure(skills, s, z)
    return tuple(seq), 1.0 - fail
