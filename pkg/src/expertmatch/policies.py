"""Matching policies: map system state to a server -> task assignment.

All policies are pure readers of the state they receive; tie-breaks consume
the state's seeded tie RNG, so identical (state, spec, seed) triples produce
identical assignments.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from itertools import islice
from typing import Optional

import numpy as np

from .model import (
    KEY_TOTAL,
    CanonicalKey,
    Scenario,
    canonical_key,
    feedback_probability,
    posterior_on_failure,
    posterior_with_feedback,
    type_from_key,
)

RANDOM = "random"
GREEDY = "greedy"
NP_GREEDY = "np-greedy"
BP_Y = "bp-y"
BP_EPS = "bp-eps"
BP_FEEDBACK = "bp-feedback"

KINDS = (RANDOM, GREEDY, NP_GREEDY, BP_Y, BP_EPS, BP_FEEDBACK)


class PolicyError(ValueError):
    """Policy specification does not fit the scenario."""


@dataclass(frozen=True)
class PolicySpec:
    """Which policy to run and its parameters.

    y_set is required for the bookkeeping policies (bp-y, bp-feedback);
    epsilon is required for bp-eps; greedy_x switches the X-serving mode of
    bp-y/bp-feedback from uniform to per-server success-greedy.
    """

    kind: str
    y_set: Optional[tuple] = None
    epsilon: Optional[float] = None
    greedy_x: bool = False
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        needs_y = self.kind in (BP_Y, BP_FEEDBACK)
        if needs_y and not self.y_set:
            raise PolicyError(f"{self.kind} requires a y_set")
        if not needs_y and self.y_set is not None:
            raise PolicyError(f"{self.kind} does not take a y_set")
        if self.kind == BP_EPS:
            if self.epsilon is None or not 0.0 < self.epsilon <= 2.0:
                raise PolicyError("bp-eps requires 0 < epsilon <= 2")
        elif self.epsilon is not None:
            raise PolicyError(f"{self.kind} does not take epsilon")


class BackpressureState:
    """Bookkeeping for the Y-set policies.

    n_tilde[i] counts tasks of the i-th Y type that never held a type outside
    Y; x_tilde counts returned tasks per key; x_total is the virtual queue X
    (every unresolved task that ever left Y). Weight ingredients (psi values,
    successor positions, feedback splits) are precompiled over the Y order.
    """

    def __init__(self, scn: Scenario, y_keys):
        keys = []
        seen = set()
        for k in y_keys:
            k = tuple(k)
            if k not in seen:
                seen.add(k)
                keys.append(k)
        self.y_keys = keys
        self.y_index = {k: i for i, k in enumerate(keys)}
        self.size = len(keys)
        m = scn.n_servers
        skills = scn.skills
        types = [type_from_key(k) for k in keys]
        self.psi_y = np.zeros((m, self.size))
        self.succ_y = np.full((m, self.size), -1, dtype=np.int64)
        for s in range(m):
            for i, z in enumerate(types):
                psi = float(z.w @ (1.0 - skills.p[s]))
                self.psi_y[s, i] = psi
                if psi > 0.0:
                    succ = canonical_key(posterior_on_failure(skills, s, z))
                    self.succ_y[s, i] = self.y_index.get(succ, -1)
        self.xi_y = None
        self.succ_yf = None
        if scn.feedback is not None:
            nf = scn.feedback.n_symbols
            self.xi_y = np.zeros((m, self.size, nf))
            self.succ_yf = np.full((m, self.size, nf), -1, dtype=np.int64)
            for s in range(m):
                for i, z in enumerate(types):
                    for f in range(nf):
                        xi = feedback_probability(skills, scn.feedback, s, z, f)
                        self.xi_y[s, i, f] = xi
                        if xi > 0.0:
                            zf, _ = posterior_with_feedback(
                                skills, scn.feedback, s, z, f
                            )
                            self.succ_yf[s, i, f] = self.y_index.get(
                                canonical_key(zf), -1
                            )
        self.n_tilde = np.zeros(self.size)
        self.x_tilde: dict = {}
        self.x_total = 0
        # registry positions of the Y types; bound by the owning SystemState
        self.y_type_idx = np.full(self.size, -1, dtype=np.int64)
        self.pos_of_idx: dict = {}

    def ypos(self, key) -> Optional[int]:
        return self.y_index.get(tuple(key))

    def n_tilde_of(self, key) -> float:
        i = self.y_index.get(tuple(key))
        return float(self.n_tilde[i]) if i is not None else 0.0

    def x_tilde_of(self, key) -> int:
        return self.x_tilde.get(tuple(key), 0)


def bp_weight(bp: BackpressureState, skills, s: int, z_key) -> float:
    """w_{s,z} = Ntilde_z - psi_s(z) * (Ntilde of the failure successor, or X)."""
    i = bp.y_index[tuple(z_key)]
    j = bp.succ_y[s, i]
    tail = bp.n_tilde[j] if j >= 0 else float(bp.x_total)
    return float(bp.n_tilde[i] - bp.psi_y[s, i] * tail)


def _kth_task(qdict: dict, k: int):
    if not qdict:
        return None
    if k >= len(qdict):
        k = len(qdict) - 1
    return next(islice(qdict.values(), k, k + 1))


def _heap_argmin(heap, eligible, tie_rng):
    """Pop the min-psi eligible index off a lazy heap; ties drawn uniformly.

    Entries are (psi, idx) pushed when a queue activates; stale or duplicate
    entries are discarded lazily. Tied survivors are pushed back.
    """
    while heap:
        psi, idx = heap[0]
        if not eligible(idx):
            heapq.heappop(heap)
            continue
        cands = []
        while heap and heap[0][0] == psi:
            _, j = heapq.heappop(heap)
            if eligible(j) and j not in cands:
                cands.append(j)
        for j in cands:
            heapq.heappush(heap, (psi, j))
        if not cands:
            continue
        cands.sort()
        if len(cands) == 1:
            return cands[0]
        return cands[int(tie_rng.integers(len(cands)))]
    return None


def _scan_argmin(state, s: int, idxs, tie_rng, psi_cap=None):
    best = None
    cands = []
    for idx in idxs:
        psi = state.psi(s, idx)
        if psi_cap is not None and psi >= psi_cap:
            continue
        if best is None or psi < best:
            best = psi
            cands = [idx]
        elif psi == best:
            cands.append(idx)
    if not cands:
        return None
    cands.sort()
    if len(cands) == 1:
        return cands[0]
    return cands[int(tie_rng.integers(len(cands)))]


def random_assign(state, rng) -> list:
    """Every server gets a uniformly random outstanding task, or idles."""
    m = state.n_servers
    n = len(state.live)
    if n == 0:
        return [None] * m
    picks = rng.integers(0, n, size=m)
    return [state.live[int(i)] for i in picks]


def preemptive_greedy_assign(state, skills) -> list:
    """Each server takes a task from a nonempty queue minimizing psi_s.

    Servers landing on the same queue take successive tasks from its head.
    """
    m = state.n_servers
    assign: list = [None] * m
    if not state.nonempty:
        return assign
    taken: dict = {}
    for s in range(m):
        if state.greedy_heaps is not None:
            idx = _heap_argmin(
                state.greedy_heaps[s], lambda i: i in state.nonempty, state.tie_rng
            )
        else:
            idx = _scan_argmin(state, s, state.nonempty, state.tie_rng)
        if idx is None:
            continue
        k = taken.get(idx, 0)
        taken[idx] = k + 1
        assign[s] = _kth_task(state.queue_view(idx), k)
    return assign


def nonpreemptive_greedy_assign(state, skills, completing_server: int) -> list:
    """Re-select only for the given server; everyone else keeps their task.

    The server picks the nonempty queue minimizing psi_s among queues with
    psi_s < 1 and serves the earliest task in it that nobody is working on
    (joining the earliest task when all are taken). Idles if nothing
    qualifies.
    """
    assign = list(state.assignment)
    s = completing_server

    def eligible(i):
        return i in state.nonempty and state.psi(s, i) < 1.0

    if state.greedy_heaps is not None:
        idx = _heap_argmin(state.greedy_heaps[s], eligible, state.tie_rng)
    else:
        idx = _scan_argmin(state, s, state.nonempty, state.tie_rng, psi_cap=1.0)
    if idx is None:
        assign[s] = None
        return assign
    q = state.queue_view(idx)
    chosen = None
    for task in q.values():
        if task.n_assigned == 0:
            chosen = task
            break
    if chosen is None:
        chosen = next(iter(q.values()))
    assign[s] = chosen
    return assign


def _bp_apply(state, spec: PolicySpec, weights: np.ndarray) -> list:
    """Mode test plus per-server arg-max, shared by bp-y and bp-feedback."""
    m = state.n_servers
    bp = state.bp
    assign: list = [None] * m
    active = bp.n_tilde > 0.0
    any_active = bool(active.any())
    if any_active:
        masked = np.where(active[None, :], weights, -np.inf)
        max_w = masked.max(axis=1)
    else:
        masked = None
        max_w = np.zeros(m)
    lhs = float(state.mu @ max_w)
    rhs = bp.x_total * state.k_min
    if lhs >= rhs and any_active:
        taken: dict = {}
        for s in range(m):
            row = masked[s]
            best = row.max()
            cands = np.flatnonzero(row == best)
            pos = int(cands[0]) if cands.size == 1 else int(
                cands[int(state.tie_rng.integers(cands.size))]
            )
            idx = int(bp.y_type_idx[pos])
            k = taken.get(idx, 0)
            taken[idx] = k + 1
            assign[s] = _kth_task(state.fresh[idx], k)
        return assign
    if bp.x_total > 0:
        if spec.greedy_x:
            taken = {}
            for s in range(m):
                if state.x_heaps is not None:
                    idx = _heap_argmin(
                        state.x_heaps[s],
                        lambda i: i in state.tainted_nonempty,
                        state.tie_rng,
                    )
                else:
                    idx = _scan_argmin(state, s, state.tainted_nonempty, state.tie_rng)
                if idx is None:
                    continue
                k = taken.get(idx, 0)
                taken[idx] = k + 1
                assign[s] = _kth_task(state.tainted[idx], k)
        else:
            n = len(state.x_list)
            picks = state.tie_rng.integers(0, n, size=m)
            for s in range(m):
                assign[s] = state.x_list[int(picks[s])]
    return assign


def backpressure_assign(state, skills, spec: PolicySpec) -> list:
    """Backpressure over a finite belief set Y with a virtual queue X.

    In backpressure mode each server serves the never-left-Y population of an
    arg-max-weight queue; otherwise every server serves the X population.
    """
    bp = state.bp
    succ = bp.succ_y
    tails = np.where(succ >= 0, bp.n_tilde[np.where(succ >= 0, succ, 0)], bp.x_total)
    weights = bp.n_tilde[None, :] - bp.psi_y * tails
    return _bp_apply(state, spec, weights)


def modified_backpressure_assign(state, skills, fb, spec: PolicySpec) -> list:
    """Feedback-aware backpressure: weights sum the xi-splits of each queue."""
    if fb is None:
        raise PolicyError("bp-feedback requires a feedback model")
    bp = state.bp
    succ = bp.succ_yf
    tails = np.where(succ >= 0, bp.n_tilde[np.where(succ >= 0, succ, 0)], bp.x_total)
    weights = bp.n_tilde[None, :] - np.einsum("sif,sif->si", bp.xi_y, tails)
    return _bp_apply(state, spec, weights)


def bp_eps_cell(z, epsilon: float) -> tuple:
    """Axis-aligned grid cell of a mixed type; cells have L1 diameter <= eps.

    The per-coordinate step is epsilon / dim, evaluated on the canonical
    integer representation so types sharing a canonical key share a cell.
    """
    if not 0.0 < epsilon <= 2.0:
        raise PolicyError("epsilon must lie in (0, 2]")
    key = canonical_key(z)
    dim = len(key)
    step = epsilon * KEY_TOTAL / dim
    return tuple(int(k / step) for k in key)


def backpressure_eps_assign(state, skills, spec: PolicySpec) -> list:
    """Backpressure on a fixed simplex partition, with no X bookkeeping.

    Weight of type z for server s is N(cell of z) - psi_s(z) * N(cell of its
    failure successor); each server serves an arg-max nonempty type.
    """
    m = state.n_servers
    assign: list = [None] * m
    if not state.nonempty:
        return assign
    idxs = sorted(state.nonempty)
    cell_n = state.cell_count
    taken: dict = {}
    for s in range(m):
        best = None
        cands: list = []
        for idx in idxs:
            w = float(cell_n.get(state.cell_of(idx), 0))
            psi = state.psi(s, idx)
            if psi > 0.0:
                j = state.succ(s, idx)
                w -= psi * cell_n.get(state.cell_of(j), 0)
            if best is None or w > best:
                best = w
                cands = [idx]
            elif w == best:
                cands.append(idx)
        idx = cands[0] if len(cands) == 1 else cands[
            int(state.tie_rng.integers(len(cands)))
        ]
        k = taken.get(idx, 0)
        taken[idx] = k + 1
        assign[s] = _kth_task(state.queue_view(idx), k)
    return assign
