"""Command-line surface: simulate, sweep, stability, ingest, plan.

Scenarios travel as JSON files, time series as CSV, reports as JSON. Every
emitted document carries a format_version field. All subcommands are
deterministic under --seed: rerunning with identical inputs produces byte
identical outputs.

Exit codes: 0 on success, 2 for usage errors (bad flags, malformed grids),
1 for runtime failures, reported as a single `error: ...` line on stderr.
"""

import json
import math
import os

import click
import numpy as np

from . import __version__
from .analysis import (
    SolverError,
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
from .engine import INCONCLUSIVE, RunConfig, classify_stability, estimate_delay, run, sweep
from .ingest import DataFormatError, build_scenario_from_logs
from .model import Scenario, type_from_key
from .policies import BP_FEEDBACK, BP_Y, KINDS, PolicyError, PolicySpec
from .scenarios import bundled_scenario, load_scenario, save_scenario

FORMAT_VERSION = 1


class CliError(click.ClickException):
    """Runtime failure: single-line `error: ...` on stderr, exit code 1."""

    exit_code = 1

    def show(self, file=None):
        click.echo(f"error: {self.format_message()}", err=True)


def _fail(exc):
    # collapse whitespace so the error line stays machine-parsable
    cause = exc if isinstance(exc, BaseException) else None
    raise CliError(" ".join(str(exc).split())) from cause


def _load(path) -> Scenario:
    try:
        return load_scenario(path)
    except KeyError as exc:
        _fail(f"scenario file missing field {exc}")
    except (OSError, ValueError) as exc:
        _fail(exc)


def _policy_spec(scn: Scenario, policy, y_depth, epsilon, greedy_x) -> PolicySpec:
    kwargs = {}
    if policy in (BP_Y, BP_FEEDBACK):
        kwargs["y_set"] = tuple(construct_y_set(scn, y_depth))
    if epsilon is not None:
        kwargs["epsilon"] = epsilon
    try:
        return PolicySpec(kind=policy, greedy_x=greedy_x, **kwargs)
    except PolicyError as exc:
        raise click.UsageError(str(exc))


def _policy_doc(spec: PolicySpec, y_depth) -> dict:
    doc = {"kind": spec.kind, "greedy_x": spec.greedy_x}
    if spec.y_set is not None:
        doc["y_depth"] = y_depth
        doc["y_size"] = len(spec.y_set)
    if spec.epsilon is not None:
        doc["epsilon"] = spec.epsilon
    return doc


def _write_json(doc: dict, path):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None:
        click.echo(text, nl=False)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _fmt(x) -> str:
    return repr(float(x))


def _policy_options(f):
    f = click.option(
        "--greedy-x",
        is_flag=True,
        help="Serve the out-of-set queue success-greedily instead of uniformly.",
    )(f)
    f = click.option(
        "--epsilon",
        type=float,
        default=None,
        help="Cell width for bp-eps (0 < epsilon <= 2).",
    )(f)
    f = click.option(
        "--y-depth",
        type=click.IntRange(min=0),
        default=1,
        show_default=True,
        help="Posterior depth of the tracked type set for bp-y/bp-feedback.",
    )(f)
    f = click.option(
        "--policy",
        type=click.Choice(KINDS),
        required=True,
        help="Assignment policy.",
    )(f)
    return f


@click.group()
@click.version_option(version=__version__, prog_name="expertmatch")
def main():
    """Task-expert matching under type uncertainty: simulate and analyze."""


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@_policy_options
@click.option("--horizon", type=click.FloatRange(min=0, min_open=True),
              default=10000.0, show_default=True, help="Simulated time units.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--sample-interval", type=click.FloatRange(min=0, min_open=True),
              default=1.0, show_default=True, help="Occupancy sampling period.")
@click.option("--out-dir", "-o", type=click.Path(file_okay=False), default=".",
              show_default=True, help="Directory for trace.csv and summary.json.")
def simulate(scenario, policy, y_depth, epsilon, greedy_x, horizon, seed,
             sample_interval, out_dir):
    """Run one simulation; write trace.csv and summary.json."""
    scn = _load(scenario)
    spec = _policy_spec(scn, policy, y_depth, epsilon, greedy_x)
    cfg = RunConfig(horizon=horizon, seed=seed, sample_interval=sample_interval)
    try:
        metrics = run(scn, spec, cfg)
    except (ValueError, TruncationError) as exc:
        _fail(exc)
    try:
        stability = classify_stability(metrics)
    except ValueError:
        stability = INCONCLUSIVE  # too few samples to call either way
    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, "trace.csv")
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("time,total_tasks\n")
        for t, n in zip(metrics.sample_times, metrics.sample_totals):
            fh.write(f"{_fmt(t)},{int(n)}\n")
    summary = {
        "format_version": FORMAT_VERSION,
        "lambda": scn.lam,
        "policy": _policy_doc(spec, y_depth),
        "horizon": horizon,
        "seed": seed,
        "warmup": metrics.warmup,
        "arrivals": metrics.arrivals,
        "completions": metrics.completions,
        "final_n": metrics.final_n,
        "throughput": metrics.throughput,
        "time_avg_n": metrics.time_avg_n,
        "delay": estimate_delay(metrics) if scn.lam > 0 else None,
        "stability": stability,
    }
    _write_json(summary, os.path.join(out_dir, "summary.json"))
    click.echo(f"wrote {trace_path} and {os.path.join(out_dir, 'summary.json')}")


@main.command("sweep")
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@_policy_options
@click.option("--lambda-min", type=float, required=True)
@click.option("--lambda-max", type=float, required=True)
@click.option("--lambda-step", type=click.FloatRange(min=0, min_open=True), required=True)
@click.option("--runs-per-point", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--horizon", type=click.FloatRange(min=0, min_open=True),
              default=10000.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True,
              help="Process pool size for independent runs.")
@click.option("--out-dir", "-o", type=click.Path(file_okay=False), default=".",
              show_default=True, help="Directory for sweep.csv.")
def sweep_cmd(scenario, policy, y_depth, epsilon, greedy_x, lambda_min, lambda_max,
              lambda_step, runs_per_point, horizon, seed, workers, out_dir):
    """Classify stability across an arrival-rate grid; write sweep.csv."""
    if lambda_max < lambda_min:
        raise click.UsageError("empty lambda grid: --lambda-max below --lambda-min")
    count = int(math.floor((lambda_max - lambda_min) / lambda_step + 1e-9)) + 1
    lams = [round(lambda_min + i * lambda_step, 10) for i in range(count)]
    scn = _load(scenario)
    spec = _policy_spec(scn, policy, y_depth, epsilon, greedy_x)
    cfg = RunConfig(horizon=horizon, seed=seed)
    try:
        result = sweep(scn, spec, lams, cfg, runs_per_point=runs_per_point,
                       workers=workers)
    except (ValueError, TruncationError) as exc:
        _fail(exc)
    crit = result.critical_estimate
    crit_s = _fmt(crit) if crit is not None else ""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "sweep.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("lambda,stability,delay,critical_estimate\n")
        for pt in result.points:
            delay_s = _fmt(pt.delay) if pt.delay is not None else ""
            fh.write(f"{_fmt(pt.lam)},{pt.stability},{delay_s},{crit_s}\n")
    click.echo(f"wrote {path}")


def _infer_asymmetric_a(scn: Scenario) -> float:
    p, mu = scn.skills.p, scn.skills.mu
    shape_ok = p.shape == (2, 2) and np.all(mu == 1.0)
    if shape_ok:
        shape_ok = p[0, 0] == 1.0 and p[1, 0] == 1.0 and p[1, 1] == 0.0 and p[0, 1] > 0.0
    if shape_ok:
        shape_ok = len(scn.priors) == 1 and np.array_equal(
            scn.priors[0][0].w, np.array([0.5, 0.5])
        )
    if not shape_ok:
        _fail(
            "asymmetric mode requires the two-class benchmark: "
            "p = [[1, a], [1, 0]], unit rates, single uniform prior"
        )
    return float(p[0, 1])


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["lp", "asymmetric", "random-formula"]),
              required=True, help="Which stability analysis to run.")
@click.option("--depth", type=click.IntRange(min=0), default=2, show_default=True,
              help="Posterior-graph truncation depth (lp mode).")
@click.option("--residual", type=click.FloatRange(min=0), default=0.0,
              show_default=True, help="Target residual flow for graph expansion.")
@click.option("--max-nodes", type=click.IntRange(min=1), default=20000, show_default=True)
@click.option("--tol", type=click.FloatRange(min=0, min_open=True), default=1e-3,
              show_default=True, help="Bisection tolerance on the critical rate.")
@click.option("--min-slack", type=click.FloatRange(min=0, min_open=True), default=1e-6,
              show_default=True)
@click.option("--out", "-o", type=click.Path(dir_okay=False), default=None,
              help="Report path (default: stdout).")
def stability(scenario, mode, depth, residual, max_nodes, tol, min_slack, out):
    """Analytic stability report: LP frontier or closed-form thresholds."""
    scn = _load(scenario)
    doc = {"format_version": FORMAT_VERSION, "mode": mode}
    if mode == "asymmetric":
        a = _infer_asymmetric_a(scn)
        doc["a"] = a
        doc["thresholds"] = asymmetric_thresholds(a)
    elif mode == "random-formula":
        try:
            doc["threshold"] = random_policy_threshold(scn)
        except UnservableClassError as exc:
            _fail(exc)
    else:
        try:
            graph = build_type_graph(scn, depth, residual_target=residual,
                                     max_nodes=max_nodes)
            critical = max_stable_rate(scn, depth, residual, max_nodes,
                                       min_slack=min_slack, tol=tol, graph=graph)
            sol = lp_feasible(graph, scn.skills, critical, min_slack)
        except (TruncationError, SolverError, ValueError) as exc:
            _fail(exc)
        labels = scn.skills.labels or tuple(str(s) for s in range(scn.n_servers))
        flows = [
            {
                "server": labels[s],
                "weights": type_from_key(key).w.tolist(),
                "rate": rate,
            }
            for (s, key), rate in sorted(sol.nu.items())
            if rate > 1e-12
        ]
        doc.update(
            critical_rate=critical,
            depth=depth,
            nodes=graph.n_nodes,
            flow={
                "feasible": sol.feasible,
                "t_star": sol.t_star,
                "min_slack": sol.min_slack,
                "status": sol.status,
                "residual_flow": sol.residual_flow,
                "residual_ok": sol.residual_ok,
                "slack": {labels[s]: d for s, d in sorted(sol.slack.items())},
                "attempt_rates": flows,
            },
        )
    _write_json(doc, out)
    if out is not None:
        click.echo(f"wrote {out}")


@main.command()
@click.option("--answers", type=click.Path(exists=True, dir_okay=False),
              help="Per-user per-tag answer/accept counts CSV.")
@click.option("--questions", type=click.Path(exists=True, dir_okay=False),
              help="Question tag-set CSV.")
@click.option("-k", "--clusters", "k", type=click.IntRange(min=1),
              help="Number of server clusters.")
@click.option("--bundled", type=str, default=None,
              help="Write a bundled scenario (e.g. mathse) instead of ingesting CSVs.")
@click.option("--lam", type=click.FloatRange(min=0), default=1.0, show_default=True,
              help="Arrival rate stamped into the scenario.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--min-accepted", type=click.IntRange(min=0), default=5, show_default=True,
              help="Evidence floor: skills with fewer accepted answers become 0.")
@click.option("--min-fraction", type=click.FloatRange(min=0, max=1), default=0.01,
              show_default=True, help="Frequency floor for kept tag combinations.")
@click.option("--mu-default", type=click.FloatRange(min=0, min_open=True), default=1.0,
              show_default=True)
@click.option("--size-weighted", is_flag=True,
              help="Scale server rates by cluster size.")
@click.option("--max-iter", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--out", "-o", type=click.Path(dir_okay=False), required=True,
              help="Scenario file to write.")
def ingest(answers, questions, k, bundled, lam, seed, min_accepted, min_fraction,
           mu_default, size_weighted, max_iter, out):
    """Build a scenario file from activity logs (or a bundled dataset)."""
    if bundled is not None:
        if answers or questions or k:
            raise click.UsageError("--bundled excludes --answers/--questions/-k")
        try:
            scn = bundled_scenario(bundled, lam=lam)
        except (OSError, ValueError) as exc:
            _fail(f"unknown bundled scenario {bundled!r}")
    else:
        if not (answers and questions and k):
            raise click.UsageError("ingest needs --answers, --questions and -k "
                                   "(or --bundled)")
        try:
            scn, _ = build_scenario_from_logs(
                answers, questions, k,
                seed=seed, lam=lam, min_accepted=min_accepted,
                min_fraction=min_fraction, mu_default=mu_default,
                size_weighted=size_weighted, max_iter=max_iter,
            )
        except (DataFormatError, OSError, ValueError) as exc:
            _fail(exc)
    save_scenario(scn, out)
    click.echo(f"wrote {out} ({scn.n_servers} servers, {scn.n_classes} classes, "
               f"{len(scn.priors)} priors)")


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--prior-index", type=click.IntRange(min=0), required=True,
              help="Which scenario prior to plan for.")
@click.option("--tau", type=click.IntRange(min=0), required=True,
              help="Attempt budget: the plan makes tau+1 attempts.")
@click.option("--out", "-o", type=click.Path(dir_okay=False), default=None,
              help="Plan path (default: stdout).")
def plan(scenario, prior_index, tau, out):
    """Greedy single-task attempt plan for one prior type."""
    scn = _load(scenario)
    if prior_index >= len(scn.priors):
        _fail(f"prior index {prior_index} out of range: scenario has "
              f"{len(scn.priors)} priors")
    z0 = scn.priors[prior_index][0]
    seq, g = plan_single_task(scn.skills, z0, tau)
    labels = scn.skills.labels or tuple(str(s) for s in range(scn.n_servers))
    doc = {
        "format_version": FORMAT_VERSION,
        "prior_index": prior_index,
        "tau": tau,
        "weights": z0.w.tolist(),
        "servers": [int(s) for s in seq],
        "server_labels": [labels[s] for s in seq],
        "success_probability": g,
    }
    _write_json(doc, out)
    if out is not None:
        click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
