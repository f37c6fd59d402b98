"""Event-driven continuous-time simulation of the matching system.

Arrivals are Poisson; each server carries an exponential attempt clock that
keeps running across reassignments (frozen while idle, redrawn only when its
own attempt completes), which is distribution-preserving because the clocks
are memoryless. The completing attempt lands on whatever task the current
assignment designates at that instant.
"""

from __future__ import annotations

import heapq
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import policies
from .model import (
    KEY_TOTAL,
    MixedType,
    Scenario,
    UndefinedPosteriorError,
    canonical_key,
    validate_scenario,
)
from .policies import (
    BP_EPS,
    BP_FEEDBACK,
    BP_Y,
    GREEDY,
    NP_GREEDY,
    RANDOM,
    BackpressureState,
    PolicyError,
    PolicySpec,
)

INF = float("inf")

STABLE = "stable"
UNSTABLE = "unstable"
INCONCLUSIVE = "inconclusive"


class Task:
    __slots__ = (
        "uid",
        "true_class",
        "type_idx",
        "tainted",
        "arrival_time",
        "entry_time",
        "live_pos",
        "x_pos",
        "n_assigned",
        "attempts",
    )

    def __init__(self, uid: int, true_class: int, arrival_time: float):
        self.uid = uid
        self.true_class = true_class
        self.type_idx = -1
        self.tainted = False
        self.arrival_time = arrival_time
        self.entry_time = arrival_time
        self.live_pos = -1
        self.x_pos = -1
        self.n_assigned = 0
        self.attempts = 0

    def __repr__(self):
        return f"Task(uid={self.uid}, class={self.true_class}, type={self.type_idx})"


class SystemState:
    """Mutable queue state over interned belief types.

    Types are interned by canonical key; the stored representative is the
    key-derived vector, so any two numerically identical beliefs share one
    queue regardless of how their posterior chains were ordered. Queues are
    insertion-ordered dicts (FCFS); each type has a fresh sub-queue (never
    left Y) and a tainted one (counted in X), the latter only populated by
    the bookkeeping policies.
    """

    def __init__(self, scn: Scenario, spec: PolicySpec, tie_rng):
        self.scenario = scn
        self.skills = scn.skills
        self.mu = scn.skills.mu
        self.n_servers = scn.n_servers
        self.k_min = scn.min_class_capacity()
        self.spec = spec
        self.tie_rng = tie_rng
        self.clock = 0.0
        self.arrivals = 0
        self.completions = 0
        self._uid = 0
        # type registry
        self.keys: list = []
        self.types: list = []
        self.index: dict = {}
        self._psi: list = []
        self._succ: list = []
        self._succ_f: dict = {}
        # queues and populations
        self.fresh: list = []
        self.tainted: list = []
        self.nonempty: set = set()
        self.tainted_nonempty: set = set()
        self.live: list = []
        self.x_list: list = []
        self.assignment: list = [None] * scn.n_servers
        # policy accelerators
        self.greedy_heaps = (
            [[] for _ in range(scn.n_servers)] if spec.kind in (GREEDY, NP_GREEDY) else None
        )
        self.x_heaps = (
            [[] for _ in range(scn.n_servers)] if spec.greedy_x else None
        )
        self.track_cells = spec.kind == BP_EPS
        self.cells: list = []
        self.cell_count: dict = {}
        self.bp: Optional[BackpressureState] = None
        if spec.kind in (BP_Y, BP_FEEDBACK):
            self.bp = BackpressureState(scn, spec.y_set)
            for i, k in enumerate(self.bp.y_keys):
                self.bp.y_type_idx[i] = self.intern_key(k)
            self.bp.pos_of_idx = {
                int(idx): i for i, idx in enumerate(self.bp.y_type_idx)
            }
        self.prior_idx = [self.intern(z) for z, _ in scn.priors]

    # -- registry ---------------------------------------------------------

    def intern(self, z: MixedType) -> int:
        return self.intern_key(canonical_key(z))

    def intern_key(self, key) -> int:
        idx = self.index.get(key)
        if idx is not None:
            return idx
        idx = len(self.keys)
        self.index[key] = idx
        self.keys.append(key)
        w = np.array(key, dtype=float) / KEY_TOTAL
        w.flags.writeable = False
        self.types.append(w)
        self._psi.append((1.0 - self.skills.p) @ w)
        self._succ.append(np.full(self.n_servers, -2, dtype=np.int64))
        self.fresh.append({})
        self.tainted.append({})
        if self.track_cells:
            self.cells.append(
                policies.bp_eps_cell(MixedType(w, _trusted=True), self.spec.epsilon)
            )
        return idx

    def psi(self, s: int, idx: int) -> float:
        return float(self._psi[idx][s])

    def type_of(self, idx: int) -> MixedType:
        return MixedType(self.types[idx], _trusted=True)

    def key_of(self, idx: int):
        return self.keys[idx]

    def cell_of(self, idx: int):
        return self.cells[idx]

    def succ(self, s: int, idx: int) -> int:
        """Registry index of the posterior after s fails on type idx (-1 if undefined)."""
        j = int(self._succ[idx][s])
        if j != -2:
            return j
        psi = float(self._psi[idx][s])
        if psi <= 0.0:
            j = -1
        else:
            num = self.types[idx] * (1.0 - self.skills.p[s])
            z = MixedType(num / num.sum(), _trusted=True)
            j = self.intern(z)
        self._succ[idx][s] = j
        return j

    def succ_feedback(self, s: int, idx: int, f: int) -> int:
        j = self._succ_f.get((s, idx, f))
        if j is not None:
            return j
        fb = self.scenario.feedback
        num = self.types[idx] * (1.0 - self.skills.p[s]) * fb.beta[s, :, f]
        xi = num.sum()
        if xi <= 0.0:
            raise UndefinedPosteriorError(
                f"feedback {f} from server {s} impossible on type {idx}"
            )
        z = MixedType(num / xi, _trusted=True)
        j = self.intern(z)
        self._succ_f[(s, idx, f)] = j
        return j

    # -- queue mechanics --------------------------------------------------

    def n_of(self, idx: int) -> int:
        return len(self.fresh[idx]) + len(self.tainted[idx])

    def queue_view(self, idx: int) -> dict:
        return self.fresh[idx]

    def _activate(self, idx: int):
        self.nonempty.add(idx)
        if self.greedy_heaps is not None:
            row = self._psi[idx]
            for s in range(self.n_servers):
                heapq.heappush(self.greedy_heaps[s], (float(row[s]), idx))

    def _activate_tainted(self, idx: int):
        self.tainted_nonempty.add(idx)
        if self.x_heaps is not None:
            row = self._psi[idx]
            for s in range(self.n_servers):
                heapq.heappush(self.x_heaps[s], (float(row[s]), idx))

    def _place(self, task: Task, idx: int):
        was_empty = self.n_of(idx) == 0
        task.type_idx = idx
        task.entry_time = self.clock
        if task.tainted:
            tq = self.tainted[idx]
            tq[task.uid] = task
            if len(tq) == 1:
                self._activate_tainted(idx)
            if self.bp is not None:
                key = self.keys[idx]
                self.bp.x_tilde[key] = self.bp.x_tilde.get(key, 0) + 1
        else:
            self.fresh[idx][task.uid] = task
            if self.bp is not None:
                self.bp.n_tilde[self.bp.pos_of_idx[idx]] += 1
        if was_empty:
            self._activate(idx)
        if self.track_cells:
            cell = self.cells[idx]
            self.cell_count[cell] = self.cell_count.get(cell, 0) + 1

    def _unplace(self, task: Task):
        idx = task.type_idx
        if task.tainted:
            tq = self.tainted[idx]
            del tq[task.uid]
            if not tq:
                self.tainted_nonempty.discard(idx)
            if self.bp is not None:
                key = self.keys[idx]
                left = self.bp.x_tilde[key] - 1
                if left:
                    self.bp.x_tilde[key] = left
                else:
                    del self.bp.x_tilde[key]
        else:
            del self.fresh[idx][task.uid]
            if self.bp is not None:
                self.bp.n_tilde[self.bp.pos_of_idx[idx]] -= 1
        if self.n_of(idx) == 0:
            self.nonempty.discard(idx)
        if self.track_cells:
            cell = self.cells[idx]
            left = self.cell_count[cell] - 1
            if left:
                self.cell_count[cell] = left
            else:
                del self.cell_count[cell]

    def _taint(self, task: Task):
        task.tainted = True
        task.x_pos = len(self.x_list)
        self.x_list.append(task)
        if self.bp is not None:
            self.bp.x_total += 1

    def add_task(self, true_class: int, idx: int) -> Task:
        task = Task(self._uid, true_class, self.clock)
        self._uid += 1
        self.arrivals += 1
        task.live_pos = len(self.live)
        self.live.append(task)
        if self.bp is not None and idx not in self.bp.pos_of_idx:
            self._taint(task)
        self._place(task, idx)
        return task

    def requeue(self, task: Task, new_idx: int):
        self._unplace(task)
        if (
            self.bp is not None
            and not task.tainted
            and new_idx not in self.bp.pos_of_idx
        ):
            self._taint(task)
        self._place(task, new_idx)

    def complete(self, task: Task):
        self._unplace(task)
        last = self.live.pop()
        if last is not task:
            self.live[task.live_pos] = last
            last.live_pos = task.live_pos
        if task.tainted:
            lastx = self.x_list.pop()
            if lastx is not task:
                self.x_list[task.x_pos] = lastx
                lastx.x_pos = task.x_pos
            if self.bp is not None:
                self.bp.x_total -= 1
        self.completions += 1

    def total_tasks(self) -> int:
        return len(self.live)


@dataclass
class RunConfig:
    horizon: float
    seed: int = 0
    warmup_fraction: float = 0.2  # share of the horizon discarded for statistics
    sample_interval: float = 1.0
    check_invariants: bool = False
    track_queues: Optional[tuple] = None  # canonical keys; default: prior support

    def resolved_warmup(self) -> float:
        return self.warmup_fraction * self.horizon


@dataclass
class RunMetrics:
    lam: float
    horizon: float
    warmup: float
    sample_times: np.ndarray
    sample_totals: np.ndarray
    tracked: dict
    arrivals: int
    completions: int
    final_n: int
    time_avg_n: float
    throughput: float
    completed_sojourns: np.ndarray


def _check_state(state: SystemState):
    assert state.arrivals == state.completions + len(state.live), "task conservation"
    n_queued = sum(len(q) for q in state.fresh) + sum(len(q) for q in state.tainted)
    assert n_queued == len(state.live), "queue membership vs live list"
    for pos, task in enumerate(state.live):
        assert task.live_pos == pos
    expect_nonempty = {i for i in range(len(state.keys)) if state.n_of(i) > 0}
    assert state.nonempty == expect_nonempty, "nonempty set"
    expect_tnonempty = {
        i for i in range(len(state.keys)) if len(state.tainted[i]) > 0
    }
    assert state.tainted_nonempty == expect_tnonempty, "tainted nonempty set"
    held = {}
    for t in state.assignment:
        if t is not None:
            held[t.uid] = held.get(t.uid, 0) + 1
            assert state.n_of(t.type_idx) > 0
    for queues in (state.fresh, state.tainted):
        for q in queues:
            for t in q.values():
                assert t.n_assigned == held.get(t.uid, 0)
    if state.bp is not None:
        bp = state.bp
        assert bp.x_total == len(state.x_list) == sum(bp.x_tilde.values())
        for pos, task in enumerate(state.x_list):
            assert task.x_pos == pos and task.tainted
        for i, idx in enumerate(bp.y_type_idx):
            assert bp.n_tilde[i] == len(state.fresh[int(idx)]), "Ntilde mismatch"
        for idx in range(len(state.keys)):
            if idx not in bp.pos_of_idx:
                assert not state.fresh[idx], "fresh task outside Y"
            key = state.keys[idx]
            assert bp.x_tilde.get(key, 0) == len(state.tainted[idx])
            # N_z = Ntilde_z + Xtilde_z for z in Y
            if idx in bp.pos_of_idx:
                assert state.n_of(idx) == bp.n_tilde[bp.pos_of_idx[idx]] + bp.x_tilde.get(
                    key, 0
                )


def _full_assign(state: SystemState, spec: PolicySpec) -> list:
    kind = spec.kind
    if kind == RANDOM:
        return policies.random_assign(state, state.tie_rng)
    if kind == GREEDY:
        return policies.preemptive_greedy_assign(state, state.skills)
    if kind == BP_Y:
        return policies.backpressure_assign(state, state.skills, spec)
    if kind == BP_EPS:
        return policies.backpressure_eps_assign(state, state.skills, spec)
    if kind == BP_FEEDBACK:
        return policies.modified_backpressure_assign(
            state, state.skills, state.scenario.feedback, spec
        )
    raise PolicyError(f"unrecognized policy kind {kind!r}")


def _apply(state: SystemState, new_assign: list):
    cur = state.assignment
    for s, task in enumerate(new_assign):
        old = cur[s]
        if old is task:
            continue
        if old is not None:
            old.n_assigned -= 1
        if task is not None:
            task.n_assigned += 1
        cur[s] = task


def _np_wake_idle(state: SystemState):
    for s in range(state.n_servers):
        if state.assignment[s] is None:
            _apply(state, policies.nonpreemptive_greedy_assign(state, state.skills, s))


def run(scenario: Scenario, spec: PolicySpec, cfg: RunConfig) -> RunMetrics:
    """Simulate one trajectory and return its metrics.

    Deterministic given (scenario, spec, cfg.seed): independent RNG streams
    drive arrivals, per-server service clocks, success draws, feedback draws,
    and policy tie-breaks.
    """
    validate_scenario(scenario)
    if cfg.horizon <= 0:
        raise ValueError("horizon must be positive")
    if cfg.sample_interval <= 0:
        raise ValueError("sample_interval must be positive")
    if not 0.0 <= cfg.warmup_fraction < 1.0:
        raise ValueError("warmup_fraction must lie in [0, 1)")
    warm = cfg.resolved_warmup()
    if spec.kind == BP_FEEDBACK and scenario.feedback is None:
        raise PolicyError("bp-feedback requires a scenario with a feedback model")

    ss = np.random.SeedSequence(cfg.seed)
    arr_ss, succ_ss, fb_ss, tie_ss, serv_ss = ss.spawn(5)
    rng_arr = np.random.default_rng(arr_ss)
    rng_succ = np.random.default_rng(succ_ss)
    rng_fb = np.random.default_rng(fb_ss)
    tie_rng = np.random.default_rng(
        tie_ss if spec.seed is None else np.random.SeedSequence(spec.seed)
    )
    serv_rngs = [np.random.default_rng(c) for c in serv_ss.spawn(scenario.n_servers)]

    state = SystemState(scenario, spec, tie_rng)
    m = scenario.n_servers
    mu = scenario.skills.mu
    p = scenario.skills.p
    lam = scenario.lam
    horizon = cfg.horizon
    np_mode = spec.kind == NP_GREEDY

    prior_cum = np.cumsum([q for _, q in scenario.priors])
    class_cum = [np.cumsum(z.w) for z, _ in scenario.priors]
    fb_cum = None
    if scenario.feedback is not None:
        fb_cum = np.cumsum(scenario.feedback.beta, axis=2)

    track_keys = (
        [tuple(k) for k in cfg.track_queues]
        if cfg.track_queues is not None
        else [state.keys[i] for i in state.prior_idx]
    )
    track_idx = [state.intern_key(k) for k in track_keys]
    tracked_counts: list = [[] for _ in track_idx]

    remaining = np.array([serv_rngs[s].exponential(1.0 / mu[s]) for s in range(m)])
    next_arrival = (
        rng_arr.exponential(1.0 / lam) if lam > 0 else INF
    )

    interval = cfg.sample_interval
    k_max = int(np.floor(horizon / interval + 1e-9))
    sample_t: list = []
    sample_n: list = []
    k_sample = 0

    area = 0.0
    area_warm = 0.0
    sojourns: list = []
    completions_warm = 0

    def emit_samples(upto: float):
        nonlocal k_sample
        n_now = len(state.live)
        while k_sample <= k_max and k_sample * interval <= upto:
            sample_t.append(k_sample * interval)
            sample_n.append(n_now)
            for slot, idx in enumerate(track_idx):
                tracked_counts[slot].append(state.n_of(idx))
            k_sample += 1

    while True:
        dt_min = INF
        s_min = -1
        for s in range(m):
            if state.assignment[s] is not None and remaining[s] < dt_min:
                dt_min = remaining[s]
                s_min = s
        t_next = state.clock + dt_min
        is_arrival = next_arrival <= t_next
        if is_arrival:
            t_next = next_arrival
        if t_next >= horizon:
            n_live = len(state.live)
            emit_samples(horizon)
            area += n_live * (horizon - state.clock)
            if horizon > warm:
                area_warm += n_live * (horizon - max(state.clock, warm))
            state.clock = horizon
            break
        n_live = len(state.live)
        emit_samples(t_next)
        dt = t_next - state.clock
        area += n_live * dt
        if t_next > warm:
            area_warm += n_live * (t_next - max(state.clock, warm))
        for s in range(m):
            if state.assignment[s] is not None:
                r = remaining[s] - dt
                remaining[s] = r if r > 0.0 else 0.0
        state.clock = t_next

        if is_arrival:
            u = rng_arr.random()
            zi = int(np.searchsorted(prior_cum, u, side="right"))
            if zi >= len(class_cum):
                zi = len(class_cum) - 1
            c = int(np.searchsorted(class_cum[zi], rng_arr.random(), side="right"))
            if c >= scenario.n_classes:
                c = scenario.n_classes - 1
            state.add_task(c, state.prior_idx[zi])
            next_arrival = state.clock + rng_arr.exponential(1.0 / lam)
            if np_mode:
                _np_wake_idle(state)
            else:
                _apply(state, _full_assign(state, spec))
        else:
            s = s_min
            task = state.assignment[s]
            task.attempts += 1
            remaining[s] = serv_rngs[s].exponential(1.0 / mu[s])
            if rng_succ.random() < p[s, task.true_class]:
                state.complete(task)
                if state.clock >= warm:
                    completions_warm += 1
                    sojourns.append(state.clock - task.arrival_time)
                for s2 in range(m):
                    if state.assignment[s2] is task:
                        state.assignment[s2] = None
                        task.n_assigned -= 1
                if np_mode:
                    _np_wake_idle(state)
                else:
                    _apply(state, _full_assign(state, spec))
            else:
                if fb_cum is not None:
                    f = int(
                        np.searchsorted(
                            fb_cum[s, task.true_class], rng_fb.random(), side="right"
                        )
                    )
                    if f >= scenario.feedback.n_symbols:
                        f = scenario.feedback.n_symbols - 1
                    new_idx = state.succ_feedback(s, task.type_idx, f)
                else:
                    new_idx = state.succ(s, task.type_idx)
                    if new_idx < 0:
                        raise UndefinedPosteriorError(
                            f"server {s} failed on type {task.type_idx} with psi=0"
                        )
                state.requeue(task, new_idx)
                if np_mode:
                    state.assignment[s] = None
                    task.n_assigned -= 1
                    _np_wake_idle(state)
                else:
                    _apply(state, _full_assign(state, spec))
        if cfg.check_invariants:
            _check_state(state)

    window = horizon - warm
    tracked = {
        k: np.array(counts, dtype=float)
        for k, counts in zip(track_keys, tracked_counts)
    }
    return RunMetrics(
        lam=lam,
        horizon=horizon,
        warmup=warm,
        sample_times=np.array(sample_t),
        sample_totals=np.array(sample_n, dtype=float),
        tracked=tracked,
        arrivals=state.arrivals,
        completions=state.completions,
        final_n=len(state.live),
        time_avg_n=area_warm / window,
        throughput=completions_warm / window,
        completed_sojourns=np.array(sojourns),
    )


def classify_stability(
    metrics: RunMetrics, theta_lo: float = 0.01, theta_hi: float = 0.05
) -> str:
    """Label a run stable/unstable/inconclusive from its occupancy trend.

    Least-squares slope of the post-warmup total-task samples, compared to
    the arrival rate: slope <= theta_lo * lam is stable, slope >= theta_hi *
    lam is unstable, anything between is inconclusive.
    """
    mask = metrics.sample_times >= metrics.warmup
    t = metrics.sample_times[mask]
    n = metrics.sample_totals[mask]
    if t.size < 100:
        raise ValueError(
            f"need at least 100 post-warmup samples to classify, got {t.size}"
        )
    t0 = t - t.mean()
    denom = float(t0 @ t0)
    slope = float(t0 @ (n - n.mean())) / denom if denom > 0 else 0.0
    lam = metrics.lam
    if slope <= theta_lo * lam:
        return STABLE
    if slope >= theta_hi * lam:
        return UNSTABLE
    return INCONCLUSIVE


def estimate_delay(metrics: RunMetrics, lam: Optional[float] = None) -> float:
    """Mean delay via Little's law: time-averaged occupancy over arrival rate."""
    lam = metrics.lam if lam is None else lam
    if lam <= 0:
        raise ValueError("delay undefined for lam <= 0")
    return metrics.time_avg_n / lam


@dataclass
class SweepPoint:
    lam: float
    stability: str
    delay: Optional[float]
    time_avg_n: float
    throughput: float


@dataclass
class SweepResult:
    points: list
    critical_estimate: Optional[float]


def _point_seed(base_seed: int, i: int, j: int) -> int:
    child = np.random.SeedSequence(entropy=base_seed, spawn_key=(i, j))
    return int(child.generate_state(1, np.uint64)[0])


def _sweep_one(args):
    scenario, spec, cfg, lam, i, j = args
    scn = Scenario(
        classes=scenario.classes,
        skills=scenario.skills,
        lam=lam,
        priors=scenario.priors,
        feedback=scenario.feedback,
    )
    run_cfg = RunConfig(
        horizon=cfg.horizon,
        seed=_point_seed(cfg.seed, i, j),
        warmup_fraction=cfg.warmup_fraction,
        sample_interval=cfg.sample_interval,
        check_invariants=cfg.check_invariants,
        track_queues=cfg.track_queues,
    )
    metrics = run(scn, spec, run_cfg)
    return i, j, classify_stability(metrics), metrics.time_avg_n, metrics.throughput


def sweep(
    scenario: Scenario,
    spec: PolicySpec,
    lambdas,
    cfg: RunConfig,
    runs_per_point: int = 1,
    workers: int = 1,
) -> SweepResult:
    """Classify stability on a grid of arrival rates.

    Each grid point gets independent seeded runs; the critical-rate estimate
    is the midpoint between the largest stable and smallest unstable lambda.
    """
    lambdas = [float(x) for x in lambdas]
    jobs = [
        (scenario, spec, cfg, lam, i, j)
        for i, lam in enumerate(lambdas)
        for j in range(runs_per_point)
    ]
    results: dict = {}
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, j, status, avg_n, thr in pool.map(_sweep_one, jobs):
                results[(i, j)] = (status, avg_n, thr)
    else:
        for job in jobs:
            i, j, status, avg_n, thr = _sweep_one(job)
            results[(i, j)] = (status, avg_n, thr)

    points = []
    for i, lam in enumerate(lambdas):
        rows = [results[(i, j)] for j in range(runs_per_point)]
        statuses = [r[0] for r in rows]
        counts = {st: statuses.count(st) for st in set(statuses)}
        status, top = INCONCLUSIVE, 0
        for st, cnt in sorted(counts.items()):
            if cnt > top:
                status, top = st, cnt
        if 2 * top <= len(statuses) and len(counts) > 1:
            status = INCONCLUSIVE
        stable_avgs = [r[1] for r in rows if r[0] == STABLE]
        avg_n = float(np.mean([r[1] for r in rows]))
        thr = float(np.mean([r[2] for r in rows]))
        delay = (
            float(np.mean(stable_avgs)) / lam
            if status == STABLE and lam > 0 and stable_avgs
            else None
        )
        points.append(SweepPoint(lam, status, delay, avg_n, thr))

    stable_ls = [pt.lam for pt in points if pt.stability == STABLE]
    unstable_ls = [pt.lam for pt in points if pt.stability == UNSTABLE]
    critical = None
    if stable_ls and unstable_ls:
        critical = 0.5 * (max(stable_ls) + min(unstable_ls))
    return SweepResult(points=points, critical_estimate=critical)
