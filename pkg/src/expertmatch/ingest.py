"""Data pipeline from Q&A activity logs to a runnable Scenario.

Per-user skill estimation from answer/acceptance counts, k-means clustering
of the skill vectors into expert archetypes (one server per cluster), and
mixed-type prior estimation from tag co-occurrence on questions.

Inputs are pre-aggregated CSV counts, not raw data dumps:

- answer log: header ``user,tag,answers,accepted``
- question log: header ``question,tags`` with ``tags`` a ``|``-separated list
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import MixedType, Scenario, make_scenario


class DataFormatError(ValueError):
    """A log file or record violates the expected format."""


def _check_counts(user, tag, n_answers: int, n_accepted: int):
    if n_answers < 0 or n_accepted < 0:
        raise DataFormatError(
            f"user {user!r} tag {tag!r}: counts must be nonnegative"
        )
    if n_accepted > n_answers:
        raise DataFormatError(
            f"user {user!r} tag {tag!r}: {n_accepted} accepted answers "
            f"exceed {n_answers} total"
        )


@dataclass
class UserTagRecord:
    """Aggregated answering activity of one user under one tag."""

    user: str
    tag: str
    n_answers: int
    n_accepted: int

    def __post_init__(self):
        _check_counts(self.user, self.tag, self.n_answers, self.n_accepted)


@dataclass
class QuestionTagRecord:
    """One question and the set of tags attached to it."""

    question: str
    tags: frozenset

    def __post_init__(self):
        self.tags = frozenset(self.tags)
        if not self.tags:
            raise DataFormatError(f"question {self.question!r} has no tags")


@dataclass
class ClusterResult:
    """Outcome of clustering user skill vectors.

    centroids rows are success-probability vectors (the skill matrix rows of
    the induced scenario), sizes counts members per cluster, assignment maps
    each input id to its cluster. objective_path records the within-cluster
    sum of squares at every iteration, for convergence inspection.
    """

    centroids: np.ndarray
    sizes: list
    assignment: dict
    n_iter: int = 0
    objective_path: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def read_answer_log(path) -> list:
    """Parse a ``user,tag,answers,accepted`` CSV into UserTagRecords."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != [
            "user", "tag", "answers", "accepted",
        ]:
            raise DataFormatError(
                f"{path}: row 1: expected header user,tag,answers,accepted"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise DataFormatError(
                    f"{path}: row {lineno}: expected 4 fields, got {len(row)}"
                )
            user, tag = row[0].strip(), row[1].strip()
            if not user or not tag:
                raise DataFormatError(
                    f"{path}: row {lineno}: empty user or tag"
                )
            try:
                n_ans = int(row[2])
                n_acc = int(row[3])
            except ValueError:
                raise DataFormatError(
                    f"{path}: row {lineno}: counts must be integers, "
                    f"got {row[2]!r}, {row[3]!r}"
                ) from None
            try:
                records.append(UserTagRecord(user, tag, n_ans, n_acc))
            except DataFormatError as exc:
                raise DataFormatError(f"{path}: row {lineno}: {exc}") from None
    return records


def read_question_log(path) -> list:
    """Parse a ``question,tags`` CSV (pipe-separated tags) into records."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["question", "tags"]:
            raise DataFormatError(
                f"{path}: row 1: expected header question,tags"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise DataFormatError(
                    f"{path}: row {lineno}: expected 2 fields, got {len(row)}"
                )
            qid = row[0].strip()
            tags = [t.strip() for t in row[1].split("|")]
            if not qid:
                raise DataFormatError(f"{path}: row {lineno}: empty question id")
            if any(not t for t in tags):
                raise DataFormatError(
                    f"{path}: row {lineno}: empty tag in {row[1]!r}"
                )
            try:
                records.append(QuestionTagRecord(qid, frozenset(tags)))
            except DataFormatError as exc:
                raise DataFormatError(f"{path}: row {lineno}: {exc}") from None
    return records


def estimate_skills(records, min_accepted: int = 5, *, tags=None):
    """Per-user success probabilities from answer counts.

    A user's skill on a tag is the empirical acceptance frequency
    n_accepted / n_answers when at least min_accepted answers were accepted,
    and 0 otherwise (too little evidence). Duplicate (user, tag) records are
    aggregated by summing counts before thresholding.

    Returns (tags, vectors): the tag tuple fixing the vector layout and a
    dict mapping each user (sorted) to its skill vector. When tags is given,
    records under other tags are ignored; otherwise tags is the sorted set
    of tags seen in the records.
    """
    if min_accepted < 0:
        raise ValueError("min_accepted must be >= 0")
    totals: dict = {}
    for r in records:
        _check_counts(r.user, r.tag, r.n_answers, r.n_accepted)
        a, c = totals.get((r.user, r.tag), (0, 0))
        totals[(r.user, r.tag)] = (a + r.n_answers, c + r.n_accepted)
    if tags is None:
        tags = tuple(sorted({t for _, t in totals}))
    else:
        tags = tuple(tags)
    col = {t: j for j, t in enumerate(tags)}
    users = sorted({u for u, _ in totals})
    vectors = {u: np.zeros(len(tags)) for u in users}
    for (u, t), (n_ans, n_acc) in totals.items():
        j = col.get(t)
        if j is None:
            continue
        if n_acc >= min_accepted and n_ans > 0:
            vectors[u][j] = n_acc / n_ans
    return tags, vectors


def _pairwise_sq(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # exact (n, k) squared distances; dimensions here are small
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _seed_centers(x: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seeding: spread initial centers by squared distance."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = min(int(np.searchsorted(np.cumsum(d2), r, side="right")), n - 1)
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans_cluster(
    vectors, k: int, seed: int = 0, max_iter: int = 100, ids=None
) -> ClusterResult:
    """Lloyd's algorithm with k-means++ seeding, deterministic under seed.

    Iterates until the assignment reaches a fixpoint or max_iter passes.
    Clusters emptied by an assignment step are repaired by moving the point
    currently farthest from its center, which keeps the objective
    non-increasing. assignment maps ids (row indices by default) to cluster
    labels.
    """
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("vectors must be a nonempty 2d array")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if ids is None:
        ids = list(range(n))
    elif len(ids) != n:
        raise ValueError("ids length must match the number of vectors")

    rng = np.random.default_rng(seed)
    centers = _seed_centers(x, k, rng)
    prev = None
    assign = np.zeros(n, dtype=np.int64)
    path = []
    it = 0
    for it in range(1, max_iter + 1):
        dist = _pairwise_sq(x, centers)
        assign = dist.argmin(axis=1)
        counts = np.bincount(assign, minlength=k)
        if np.any(counts == 0):
            cur = dist[np.arange(n), assign].copy()
            for j in np.flatnonzero(counts == 0):
                f = int(cur.argmax())
                centers[j] = x[f]
                assign[f] = j
                cur[f] = -1.0  # each repair takes a distinct point
        diff = x - centers[assign]
        path.append(float(np.einsum("nd,nd->", diff, diff)))
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        for j in range(k):
            members = np.flatnonzero(assign == j)
            centers[j] = x[members].mean(axis=0)

    sizes = np.bincount(assign, minlength=k).tolist()
    assignment = {i: int(c) for i, c in zip(ids, assign)}
    return ClusterResult(
        centroids=centers,
        sizes=sizes,
        assignment=assignment,
        n_iter=it,
        objective_path=path,
    )


def estimate_priors(records, min_fraction: float = 0.01, *, tags=None):
    """Mixed-type arrival priors from question tag co-occurrence.

    Each question contributes its tag set (intersected with tags when
    given; questions with no listed tag are dropped). Tag sets occurring on
    at least min_fraction of the contributing questions are kept, each
    mapped to a MixedType uniform over its tags, with probability equal to
    its relative frequency among kept questions.

    Returns (tags, priors) with priors a list of (MixedType, pi) ordered by
    (set size, tag names).
    """
    if not 0.0 <= min_fraction <= 1.0:
        raise ValueError("min_fraction must lie in [0, 1]")
    if tags is not None:
        tagset = frozenset(tags)
        tags = tuple(tags)
        counter = Counter()
        for r in records:
            s = frozenset(r.tags) & tagset
            if s:
                counter[s] += 1
    else:
        counter = Counter(frozenset(r.tags) for r in records)
        tags = tuple(sorted(set().union(*counter))) if counter else ()
    total = sum(counter.values())
    if total == 0:
        raise DataFormatError("no question carries any of the listed tags")
    kept = {s: c for s, c in counter.items() if c >= min_fraction * total}
    if not kept:
        raise DataFormatError(
            f"no tag set reaches the {min_fraction:.2%} frequency floor"
        )
    col = {t: j for j, t in enumerate(tags)}
    norm = sum(kept.values())
    priors = []
    for s in sorted(kept, key=lambda s: (len(s), tuple(sorted(s)))):
        w = np.zeros(len(tags))
        for t in s:
            w[col[t]] = 1.0 / len(s)
        priors.append((MixedType(w), kept[s] / norm))
    return tags, priors


def build_scenario(
    clusters: ClusterResult,
    priors,
    lam: float,
    tags,
    mu_default: float = 1.0,
    size_weighted: bool = False,
) -> Scenario:
    """Scenario with one server per cluster and one class per tag.

    Servers get rate mu_default each; with size_weighted the rates are
    scaled proportionally to cluster sizes (mean mu_default), for exploring
    capacity-weighted variants.
    """
    tags = tuple(tags)
    k, d = clusters.centroids.shape
    if d != len(tags):
        raise ValueError(
            f"centroid dimension {d} does not match {len(tags)} tags"
        )
    for z, _ in priors:
        if z.dim != len(tags):
            raise ValueError(
                f"prior dimension {z.dim} does not match {len(tags)} tags"
            )
    if size_weighted:
        total = sum(clusters.sizes)
        if total <= 0:
            raise ValueError("size_weighted needs nonempty clusters")
        mu = [mu_default * k * sz / total for sz in clusters.sizes]
    else:
        mu = [mu_default] * k
    labels = tuple(f"cluster{j + 1}" for j in range(k))
    return make_scenario(
        classes=tags,
        p=clusters.centroids,
        mu=mu,
        lam=lam,
        priors=priors,
        labels=labels,
    )


def build_scenario_from_logs(
    answer_csv,
    question_csv,
    k: int,
    seed: int = 0,
    lam: float = 1.0,
    min_accepted: int = 5,
    min_fraction: float = 0.01,
    mu_default: float = 1.0,
    size_weighted: bool = False,
    max_iter: int = 100,
    tags=None,
):
    """Full pipeline: logs -> skills -> clusters -> priors -> Scenario.

    The tag list defaults to the sorted tags of the answer log; questions
    are restricted to it. Returns (scenario, clusters).
    """
    answers = read_answer_log(answer_csv)
    questions = read_question_log(question_csv)
    tags, vectors = estimate_skills(answers, min_accepted, tags=tags)
    if not vectors:
        raise DataFormatError(f"{answer_csv}: no usable answer records")
    users = sorted(vectors)
    mat = np.array([vectors[u] for u in users])
    clusters = kmeans_cluster(mat, k, seed=seed, max_iter=max_iter, ids=users)
    _, priors = estimate_priors(questions, min_fraction, tags=tags)
    scn = build_scenario(
        clusters, priors, lam, tags,
        mu_default=mu_default, size_weighted=size_weighted,
    )
    return scn, clusters
