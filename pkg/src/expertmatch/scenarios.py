"""Scenario construction and JSON (de)serialization.

File schema (format_version 1):

    {
      "format_version": 1,
      "classes": ["c1", "c2"],
      "lambda": 0.9,
      "servers": [{"label": "s1", "mu": 1.0, "skills": [1.0, 0.5]}, ...],
      "priors": [{"weights": [0.5, 0.5], "prob": 1.0}, ...],
      "feedback": {"symbols": ["f0", "f1"], "beta": [[[...], ...], ...]}
    }

The feedback section is optional; beta is indexed [server][class][symbol].
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .model import (
    FeedbackModel,
    MixedType,
    Scenario,
    ScenarioError,
    SkillMatrix,
    canonical_key,
    make_scenario,
    validate_scenario,
)

FORMAT_VERSION = 1


def scenario_to_dict(scn: Scenario) -> dict:
    servers = []
    for s in range(scn.n_servers):
        label = scn.skills.labels[s] if scn.skills.labels else f"s{s + 1}"
        servers.append(
            {
                "label": label,
                "mu": float(scn.skills.mu[s]),
                "skills": [float(v) for v in scn.skills.p[s]],
            }
        )
    doc = {
        "format_version": FORMAT_VERSION,
        "classes": list(scn.classes),
        "lambda": scn.lam,
        "servers": servers,
        "priors": [
            {"weights": [float(v) for v in z.w], "prob": q} for z, q in scn.priors
        ],
    }
    if scn.feedback is not None:
        doc["feedback"] = {
            "symbols": list(scn.feedback.symbols),
            "beta": scn.feedback.beta.tolist(),
        }
    return doc


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        version = doc["format_version"]
        if version != FORMAT_VERSION:
            raise ScenarioError(f"unsupported scenario format_version {version}")
        classes = list(doc["classes"])
        lam = float(doc["lambda"])
        servers = doc["servers"]
        labels = [srv["label"] for srv in servers]
        mu = [float(srv["mu"]) for srv in servers]
        p = [[float(v) for v in srv["skills"]] for srv in servers]
        priors = [(pr["weights"], float(pr["prob"])) for pr in doc["priors"]]
        feedback = None
        if "feedback" in doc and doc["feedback"] is not None:
            feedback = (doc["feedback"]["symbols"], doc["feedback"]["beta"])
    except (KeyError, TypeError, IndexError) as exc:
        raise ScenarioError(f"malformed scenario document: {exc!r}") from exc
    return make_scenario(classes, p, mu, lam, priors, feedback=feedback, labels=labels)


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"scenario file is not valid JSON: {exc}") from exc
    return scenario_from_dict(doc)


def save_scenario(scn: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scn), fh, indent=2, sort_keys=True)
        fh.write("\n")


def asymmetric_scenario(a: float, lam: float = 1.0) -> Scenario:
    """Two classes, two unit-rate servers, one half/half arrival type.

    Server s1 always solves class c1 and solves class c2 with probability a;
    server s2 always solves c1 and never solves c2. The interesting regime is
    0 < a <= 1, where s2 is useless exactly on the tasks that turn out hard.
    """
    if not 0.0 < a <= 1.0:
        raise ScenarioError("asymmetric scenario needs 0 < a <= 1")
    return make_scenario(
        classes=("c1", "c2"),
        p=[[1.0, a], [1.0, 0.0]],
        mu=[1.0, 1.0],
        lam=lam,
        priors=[([0.5, 0.5], 1.0)],
        labels=("s1", "s2"),
    )


def asymmetric_y_set(scn: Scenario):
    """The two reachable belief states of the asymmetric scenario, as keys."""
    z_prior = scn.priors[0][0]
    z_hard = MixedType([0.0, 1.0])
    return [canonical_key(z_prior), canonical_key(z_hard)]


def bundled_scenario(name: str, lam: float | None = None) -> Scenario:
    """Load a scenario shipped with the package (currently: 'mathse')."""
    try:
        data = (
            resources.files("expertmatch")
            .joinpath("data", f"{name}.json")
            .read_text(encoding="utf-8")
        )
    except FileNotFoundError:
        raise ScenarioError(f"no bundled scenario named {name!r}") from None
    scn = scenario_from_dict(json.loads(data))
    if lam is not None:
        scn = Scenario(
            classes=scn.classes,
            skills=scn.skills,
            lam=float(lam),
            priors=scn.priors,
            feedback=scn.feedback,
        )
        validate_scenario(scn)
    return scn
