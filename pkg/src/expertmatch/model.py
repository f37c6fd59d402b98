"""Belief-state model for tasks whose type is only known as a distribution.

A task's type is a mixed type: a probability vector over the class set C.
Servers (experts) have per-class success probabilities; a failed attempt is
informative and shifts the belief by Bayes rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

QUANTUM = 1e-9
KEY_TOTAL = 10**9  # canonical keys are integer vectors summing to this

CanonicalKey = tuple


class ScenarioError(ValueError):
    """Scenario data failed validation."""


class UndefinedPosteriorError(ValueError):
    """Bayes update conditioned on an impossible event (zero probability)."""


class MixedType:
    """Point on the class simplex: the belief about a task's true class."""

    __slots__ = ("w",)

    def __init__(self, weights, _trusted: bool = False):
        w = np.array(weights, dtype=float)
        if not _trusted:
            if w.ndim != 1 or w.size == 0:
                raise ScenarioError("mixed type must be a non-empty vector")
            if np.any(w < 0.0) or np.any(w > 1.0):
                raise ScenarioError(f"mixed-type weights outside [0,1]: {w}")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ScenarioError(f"mixed-type weights sum to {w.sum()!r}, not 1")
        w.flags.writeable = False
        self.w = w

    @property
    def dim(self) -> int:
        return self.w.size

    def support(self) -> np.ndarray:
        return np.flatnonzero(self.w > 0.0)

    def is_pure(self) -> bool:
        return int((self.w > 0.0).sum()) == 1

    def __repr__(self):
        return f"MixedType({np.array2string(self.w, precision=6, floatmode='maxprec')})"


def pure_type(c: int, n_classes: int) -> MixedType:
    w = np.zeros(n_classes)
    w[c] = 1.0
    return MixedType(w, _trusted=True)


@dataclass(frozen=True)
class SkillMatrix:
    """Success probabilities p[s, c] and service rates mu[s] for each server."""

    p: np.ndarray
    mu: np.ndarray
    labels: tuple = ()

    @property
    def n_servers(self) -> int:
        return self.p.shape[0]

    @property
    def n_classes(self) -> int:
        return self.p.shape[1]


@dataclass(frozen=True)
class FeedbackModel:
    """Feedback alphabet and per-(server, class) symbol distributions.

    beta[s, c, f] is the probability that server s emits symbol f after a
    failed attempt at a task whose true class is c. Rows sum to 1.
    """

    symbols: tuple
    beta: np.ndarray

    @property
    def n_symbols(self) -> int:
        return len(self.symbols)


@dataclass(frozen=True)
class Scenario:
    """A complete problem instance: classes, servers, arrival process, priors."""

    classes: tuple
    skills: SkillMatrix
    lam: float
    priors: tuple  # of (MixedType, probability)
    feedback: Optional[FeedbackModel] = None

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_servers(self) -> int:
        return self.skills.n_servers

    def total_rate(self) -> float:
        return float(self.skills.mu.sum())

    def class_capacity(self, c: int) -> float:
        """Aggregate success rate sum_s mu_s * p[s,c] available to class c."""
        return float(self.skills.mu @ self.skills.p[:, c])

    def min_class_capacity(self) -> float:
        return float(min(self.class_capacity(c) for c in range(self.n_classes)))


def make_scenario(classes, p, mu, lam, priors, feedback=None, labels=()) -> Scenario:
    """Build and validate a Scenario from raw arrays.

    priors is a sequence of (weights, probability) pairs; weights may be any
    vector accepted by MixedType.
    """
    skills = SkillMatrix(
        p=np.array(p, dtype=float), mu=np.array(mu, dtype=float), labels=tuple(labels)
    )
    prior_pairs = tuple(
        (z if isinstance(z, MixedType) else MixedType(z), float(q)) for z, q in priors
    )
    fb = None
    if feedback is not None:
        if isinstance(feedback, FeedbackModel):
            fb = feedback
        else:
            symbols, beta = feedback
            fb = FeedbackModel(symbols=tuple(symbols), beta=np.array(beta, dtype=float))
    scn = Scenario(
        classes=tuple(classes), skills=skills, lam=float(lam), priors=prior_pairs, feedback=fb
    )
    validate_scenario(scn)
    return scn


def validate_scenario(scn: Scenario) -> None:
    """Check a scenario once at load time; inner loops assume it passed."""
    p, mu = scn.skills.p, scn.skills.mu
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] == 0:
        raise ScenarioError("skill matrix must be 2-D and non-empty")
    if p.shape[1] != scn.n_classes:
        raise ScenarioError("skill matrix width != number of classes")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ScenarioError("success probabilities must lie in [0,1]")
    if mu.shape != (p.shape[0],):
        raise ScenarioError("mu must have one rate per server")
    if np.any(mu <= 0.0):
        raise ScenarioError("service rates must be positive")
    if scn.skills.labels and len(scn.skills.labels) != p.shape[0]:
        raise ScenarioError("server labels must match server count")
    if scn.lam < 0.0:
        raise ScenarioError("arrival rate must be non-negative")
    if not scn.priors:
        raise ScenarioError("at least one prior type is required")
    tot = 0.0
    for z, q in scn.priors:
        if z.dim != scn.n_classes:
            raise ScenarioError("prior type dimension != number of classes")
        if q < 0.0:
            raise ScenarioError("prior probabilities must be non-negative")
        tot += q
    if abs(tot - 1.0) > 1e-9:
        raise ScenarioError(f"prior probabilities sum to {tot!r}, not 1")
    if scn.feedback is not None:
        beta = scn.feedback.beta
        if beta.shape != (p.shape[0], p.shape[1], scn.feedback.n_symbols):
            raise ScenarioError("feedback tensor shape must be (servers, classes, symbols)")
        if scn.feedback.n_symbols == 0:
            raise ScenarioError("feedback alphabet must be non-empty")
        if np.any(beta < 0.0) or np.any(beta > 1.0):
            raise ScenarioError("feedback probabilities must lie in [0,1]")
        if np.any(np.abs(beta.sum(axis=2) - 1.0) > 1e-9):
            raise ScenarioError("feedback rows must sum to 1 for every (server, class)")


def _check_dim(skills: SkillMatrix, z: MixedType) -> None:
    if z.dim != skills.n_classes:
        raise ScenarioError(
            f"mixed type has {z.dim} classes, skill matrix has {skills.n_classes}"
        )


def failure_probability(skills: SkillMatrix, s: int, z: MixedType) -> float:
    """psi_s(z) = sum_c z_c * (1 - p[s,c]), the chance server s fails on z."""
    _check_dim(skills, z)
    return float(z.w @ (1.0 - skills.p[s]))


def posterior_on_failure(skills: SkillMatrix, s: int, z: MixedType) -> MixedType:
    """Belief after server s failed on a task of belief z.

    Bayes rule: weight c scales by the class failure chance 1 - p[s,c].
    """
    _check_dim(skills, z)
    num = z.w * (1.0 - skills.p[s])
    psi = num.sum()
    if psi <= 0.0:
        raise UndefinedPosteriorError(
            f"server {s} cannot fail on {z!r}; posterior undefined"
        )
    return MixedType(num / psi, _trusted=True)


def feedback_probability(
    skills: SkillMatrix, fb: FeedbackModel, s: int, z: MixedType, f: int
) -> float:
    """xi_s(z,f): probability the attempt fails AND server s emits symbol f."""
    _check_dim(skills, z)
    return float(z.w @ ((1.0 - skills.p[s]) * fb.beta[s, :, f]))


def posterior_with_feedback(
    skills: SkillMatrix, fb: FeedbackModel, s: int, z: MixedType, f: int
):
    """Belief after a failure by server s that came with feedback symbol f.

    Returns (phi_s(z, f), xi_s(z, f)). Weight c scales by the joint chance of
    a class-c failure producing symbol f; xi is the normalizer, so xi summed
    over the alphabet recovers psi_s(z).
    """
    _check_dim(skills, z)
    num = z.w * (1.0 - skills.p[s]) * fb.beta[s, :, f]
    xi = num.sum()
    if xi <= 0.0:
        raise UndefinedPosteriorError(
            f"feedback {f} from server {s} on {z!r} has zero probability"
        )
    return MixedType(num / xi, _trusted=True), float(xi)


def canonical_key(z: MixedType) -> CanonicalKey:
    """Quantize a mixed type to an exact integer key for queue identity.

    Coordinates are rounded to the nearest multiple of 1e-9 and the integer
    vector is repaired (largest-remainder, index order on ties) so it always
    sums to KEY_TOTAL. Posterior chains that differ only in the last couple
    of ulps therefore share a key.
    """
    scaled = z.w * KEY_TOTAL
    base = np.floor(scaled).astype(np.int64)
    short = KEY_TOTAL - int(base.sum())
    if short > 0:
        rem = scaled - base
        order = np.lexsort((np.arange(rem.size), -rem))
        base[order[:short]] += 1
    elif short < 0:
        rem = scaled - base
        order = np.lexsort((np.arange(rem.size), rem))
        take = -short
        for i in order:
            if take == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                take -= 1
    return tuple(int(v) for v in base)


def type_from_key(key: CanonicalKey) -> MixedType:
    """Representative mixed type of a canonical key (sums to exactly 1)."""
    w = np.array(key, dtype=float) / KEY_TOTAL
    return MixedType(w, _trusted=True)
