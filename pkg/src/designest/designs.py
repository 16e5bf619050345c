"""Experimental designs as distributions over assignment realizations.

A design assigns each of n units to exactly one of k arms. Everything
downstream (moments, bounds, estimators) consumes the kn stacked indicator
vector in arm-major order: entry a*n + i is the indicator that unit i is in
arm a (0-based).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import product
from typing import Callable, Sequence

import numpy as np

ENUMERATION_CAP = 1_000_000


def stream_rng(seed, *index):
    """Independent generator for a (seed, index...) coordinate.

    Used by Monte-Carlo loops so that draw r never depends on worker count
    or on how many draws preceded it.
    """
    return np.random.default_rng([int(seed), *(int(j) for j in index)])


@dataclass(frozen=True)
class AssignmentRealization:
    """One realized assignment: unit i sits in arm arm_of[i] (0-based)."""

    n: int
    k: int
    arm_of: np.ndarray

    def __post_init__(self):
        arm_of = np.asarray(self.arm_of, dtype=np.int64)
        object.__setattr__(self, "arm_of", arm_of)
        if arm_of.shape != (self.n,):
            raise ValueError(f"arm_of must have shape ({self.n},)")
        if arm_of.min(initial=0) < 0 or (self.n and arm_of.max() >= self.k):
            raise ValueError("arm indices must lie in [0, k)")

    @property
    def observed_cells(self) -> np.ndarray:
        """Index of each unit's realized cell in the kn stacked vector."""
        return self.arm_of * self.n + np.arange(self.n)

    def indicator(self) -> np.ndarray:
        """kn 0/1 stacked indicator vector (exactly n ones)."""
        r = np.zeros(self.n * self.k)
        r[self.observed_cells] = 1.0
        return r


@dataclass(frozen=True)
class SupportTable:
    """Exhaustive support of an enumerable design with exact probabilities."""

    realizations: np.ndarray  # (S, n) arm indices
    probabilities: np.ndarray  # (S,)
    n: int
    k: int

    def __post_init__(self):
        realizations = np.asarray(self.realizations, dtype=np.int64)
        probabilities = np.asarray(self.probabilities, dtype=float)
        object.__setattr__(self, "realizations", realizations)
        object.__setattr__(self, "probabilities", probabilities)
        if abs(probabilities.sum() - 1.0) > 1e-12:
            raise ValueError("support probabilities must sum to 1")
        if np.any(probabilities <= 0):
            raise ValueError("support probabilities must be positive")
        if len({tuple(row) for row in realizations}) != len(realizations):
            raise ValueError("duplicate realizations in support")

    def __len__(self):
        return len(self.probabilities)

    def indicator_matrix(self) -> np.ndarray:
        """(S, kn) matrix of stacked indicator vectors, one row per point."""
        s = len(self)
        out = np.zeros((s, self.n * self.k))
        cells = self.realizations * self.n + np.arange(self.n)
        out[np.arange(s)[:, None], cells] = 1.0
        return out

    def realization(self, idx: int) -> AssignmentRealization:
        return AssignmentRealization(self.n, self.k, self.realizations[idx])


class SupportTooLargeError(ValueError):
    """Support exceeds the enumeration cap; caller should use Monte Carlo."""


class NotEnumerableError(TypeError):
    """Design exposes only a sampler (custom kind, or non-enumerable base)."""


class Design:
    """Base class: a sampleable distribution over assignment realizations.

    Immutable after construction; samplers take an explicit generator, so
    instances are safe to share across workers.
    """

    n: int
    k: int
    kind: str = "abstract"

    def sample(self, rng: np.random.Generator) -> AssignmentRealization:
        raise NotImplementedError

    def support_size(self) -> int | None:
        """Exact support size, or None when the design is not enumerable."""
        return None

    def enumerate_support(self, cap: int = ENUMERATION_CAP) -> SupportTable:
        size = self.support_size()
        if size is None:
            raise NotEnumerableError(f"{self.kind} designs are not enumerable")
        if size > cap:
            raise SupportTooLargeError(
                f"support size {size} exceeds cap {cap}; use Monte Carlo"
            )
        return self._enumerate()

    def _enumerate(self) -> SupportTable:
        raise NotEnumerableError(f"{self.kind} designs are not enumerable")

    def structural_zero_cells(self) -> np.ndarray:
        """Boolean kn mask of cells with provably zero inclusion probability."""
        return np.zeros(self.n * self.k, dtype=bool)


class BernoulliDesign(Design):
    """Independent per-unit assignment with common arm probabilities."""

    kind = "bernoulli"

    def __init__(self, n: int, probs: Sequence[float]):
        probs = np.asarray(probs, dtype=float)
        if n < 1:
            raise ValueError("n must be positive")
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("arm probabilities must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("arm probabilities must sum to 1")
        self.n = int(n)
        self.k = len(probs)
        self.probs = probs

    def sample(self, rng):
        return AssignmentRealization(
            self.n, self.k, rng.choice(self.k, size=self.n, p=self.probs)
        )

    def support_size(self):
        positive = int(np.sum(self.probs > 0))
        return positive**self.n

    def _enumerate(self):
        arms = np.flatnonzero(self.probs > 0)
        rows = np.array(list(product(arms, repeat=self.n)), dtype=np.int64)
        probs = np.prod(self.probs[rows], axis=1)
        return SupportTable(rows, probs, self.n, self.k)

    def structural_zero_cells(self):
        return np.repeat(self.probs == 0, self.n)


class CompletelyRandomizedDesign(Design):
    """Fixed per-arm counts, uniformly random allocation."""

    kind = "completely_randomized"

    def __init__(self, n: int, counts: Sequence[int]):
        counts = np.asarray(counts, dtype=np.int64)
        if np.any(counts < 0):
            raise ValueError("arm counts must be nonnegative")
        if counts.sum() != n:
            raise ValueError(f"arm counts must sum to n={n}")
        self.n = int(n)
        self.k = len(counts)
        self.counts = counts
        self._labels = np.repeat(np.arange(self.k), counts)

    def sample(self, rng):
        return AssignmentRealization(self.n, self.k, rng.permutation(self._labels))

    def support_size(self):
        size = math.factorial(self.n)
        for c in self.counts:
            size //= math.factorial(int(c))
        return size

    def _enumerate(self):
        from sympy.utilities.iterables import multiset_permutations

        rows = np.array(list(multiset_permutations(self._labels.tolist())), dtype=np.int64)
        probs = np.full(len(rows), 1.0 / len(rows))
        return SupportTable(rows, probs, self.n, self.k)

    def structural_zero_cells(self):
        return np.repeat(self.counts == 0, self.n)


def counts_from_proportions(m: int, proportions: Sequence[float]) -> np.ndarray:
    """Per-arm counts for a stratum of m units from target proportions.

    Base counts are floor(p_a * m); the r leftover units go one each to arms
    k, k-1, ..., in descending arm order.
    """
    proportions = np.asarray(proportions, dtype=float)
    if abs(proportions.sum() - 1.0) > 1e-9:
        raise ValueError("proportions must sum to 1")
    counts = np.floor(proportions * m).astype(np.int64)
    remainder = m - counts.sum()
    k = len(proportions)
    if remainder >= k:
        raise ValueError("more remainder units than arms")
    for j in range(remainder):
        counts[k - 1 - j] += 1
    return counts


def counts_from_pattern(m: int, pattern: Sequence[int], k: int) -> np.ndarray:
    """Per-arm counts from the first m entries of a cyclically repeated
    arm-label pattern (labels 1-based, e.g. (4,3,2,1,4,3,4,3,4,3))."""
    pattern = np.asarray(pattern, dtype=np.int64)
    if np.any(pattern < 1) or np.any(pattern > k):
        raise ValueError("pattern labels must be 1-based arm indices")
    reps = int(np.ceil(m / len(pattern)))
    prefix = np.tile(pattern, reps)[:m]
    return np.bincount(prefix - 1, minlength=k).astype(np.int64)


class StratifiedDesign(Design):
    """Independent complete randomizations within strata partitioning units."""

    kind = "stratified"

    def __init__(self, n: int, strata: Sequence[Sequence[int]], counts_by_stratum):
        self.n = int(n)
        self.strata = [np.asarray(s, dtype=np.int64) for s in strata]
        if any(len(s) == 0 for s in self.strata):
            raise ValueError("empty stratum")
        flat = np.concatenate(self.strata) if self.strata else np.array([], dtype=np.int64)
        if len(flat) != n or len(np.unique(flat)) != n or flat.min() < 0 or flat.max() >= n:
            raise ValueError("strata must partition units 0..n-1")
        self.counts_by_stratum = [np.asarray(c, dtype=np.int64) for c in counts_by_stratum]
        if len(self.counts_by_stratum) != len(self.strata):
            raise ValueError("one count vector per stratum required")
        ks = {len(c) for c in self.counts_by_stratum}
        if len(ks) != 1:
            raise ValueError("all strata must use the same number of arms")
        self.k = ks.pop()
        self._subdesigns = [
            CompletelyRandomizedDesign(len(s), c)
            for s, c in zip(self.strata, self.counts_by_stratum)
        ]

    @classmethod
    def from_proportions(cls, n, strata, proportions):
        counts = [counts_from_proportions(len(s), proportions) for s in strata]
        return cls(n, strata, counts)

    @classmethod
    def from_pattern(cls, n, strata, pattern, k):
        counts = [counts_from_pattern(len(s), pattern, k) for s in strata]
        return cls(n, strata, counts)

    def sample(self, rng):
        arm_of = np.empty(self.n, dtype=np.int64)
        for units, sub in zip(self.strata, self._subdesigns):
            arm_of[units] = sub.sample(rng).arm_of
        return AssignmentRealization(self.n, self.k, arm_of)

    def support_size(self):
        size = 1
        for sub in self._subdesigns:
            size *= sub.support_size()
        return size

    def _enumerate(self):
        tables = [sub.enumerate_support(cap=self.support_size()) for sub in self._subdesigns]
        rows = np.empty((1, self.n), dtype=np.int64)
        probs = np.ones(1)
        for units, table in zip(self.strata, tables):
            s_old, s_new = len(rows), len(table)
            rows = np.repeat(rows, s_new, axis=0)
            rows[:, units] = np.tile(table.realizations, (s_old, 1))
            probs = np.repeat(probs, s_new) * np.tile(table.probabilities, s_old)
        return SupportTable(rows, probs, self.n, self.k)

    def structural_zero_cells(self):
        mask = np.zeros(self.n * self.k, dtype=bool)
        for units, counts in zip(self.strata, self.counts_by_stratum):
            for a in np.flatnonzero(counts == 0):
                mask[a * self.n + units] = True
        return mask


class ClusteredDesign(Design):
    """Cluster-level randomization broadcast to member units."""

    kind = "clustered"

    def __init__(self, n: int, cluster_of: Sequence[int], cluster_design: Design):
        self.n = int(n)
        self.cluster_of = np.asarray(cluster_of, dtype=np.int64)
        if self.cluster_of.shape != (self.n,):
            raise ValueError("cluster_of must map every unit")
        n_clusters = self.cluster_of.max() + 1 if self.n else 0
        if set(np.unique(self.cluster_of)) != set(range(n_clusters)):
            raise ValueError("cluster ids must cover 0..C-1")
        if cluster_design.n != n_clusters:
            raise ValueError("cluster design size must equal number of clusters")
        self.cluster_design = cluster_design
        self.k = cluster_design.k

    def sample(self, rng):
        cluster_arms = self.cluster_design.sample(rng).arm_of
        return AssignmentRealization(self.n, self.k, cluster_arms[self.cluster_of])

    def support_size(self):
        return self.cluster_design.support_size()

    def _enumerate(self):
        base = self.cluster_design.enumerate_support(cap=ENUMERATION_CAP)
        rows = base.realizations[:, self.cluster_of]
        return SupportTable(rows, base.probabilities, self.n, self.k)

    def structural_zero_cells(self):
        base = self.cluster_design.structural_zero_cells().reshape(self.k, -1)
        return base[:, self.cluster_of].reshape(-1)


class CustomDesign(Design):
    """Wraps a user sampler; Monte-Carlo only downstream."""

    kind = "custom"

    def __init__(self, n: int, k: int, sampler: Callable[[np.random.Generator], np.ndarray]):
        self.n = int(n)
        self.k = int(k)
        self.sampler = sampler

    def sample(self, rng):
        return AssignmentRealization(self.n, self.k, np.asarray(self.sampler(rng)))


def sample_assignment(design: Design, rng: np.random.Generator) -> AssignmentRealization:
    """Draw one assignment from the design using the supplied stream."""
    return design.sample(rng)


def enumerate_support(design: Design, cap: int = ENUMERATION_CAP) -> SupportTable:
    """Exhaustive support with exact probabilities (small designs only)."""
    return design.enumerate_support(cap=cap)


def read_group_csv(path) -> tuple[np.ndarray, list[np.ndarray]]:
    """Read a unit_id,group_id CSV; returns (unit ids sorted, groups as
    lists of 0-based unit positions)."""
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"unit_id", "group_id"} - set(reader.fieldnames):
            raise ValueError("group CSV must have columns unit_id,group_id")
        for row in reader:
            pairs.append((int(row["unit_id"]), row["group_id"]))
    if not pairs:
        raise ValueError("empty group CSV")
    unit_ids = np.array(sorted(p[0] for p in pairs))
    if len(np.unique(unit_ids)) != len(unit_ids):
        raise ValueError("duplicate unit_id in group CSV")
    position = {u: i for i, u in enumerate(unit_ids)}
    groups: dict[str, list[int]] = {}
    for unit, group in pairs:
        groups.setdefault(group, []).append(position[unit])
    ordered = [np.array(sorted(groups[g]), dtype=np.int64) for g in sorted(groups)]
    return unit_ids, ordered


def build_design(spec: dict) -> Design:
    """Construct a validated design from a config mapping.

    Recognized kinds: bernoulli, completely_randomized, stratified,
    clustered, exposure_derived. Stratified specs accept per-stratum
    ``counts``, shared ``proportions`` (remainders to descending arms), or a
    repeated arm-label ``pattern``.
    """
    kind = spec.get("kind")
    if kind == "bernoulli":
        return BernoulliDesign(spec["n"], spec["probs"])
    if kind == "completely_randomized":
        return CompletelyRandomizedDesign(spec["n"], spec["counts"])
    if kind == "stratified":
        if "strata_csv" in spec:
            _, strata = read_group_csv(spec["strata_csv"])
            n = sum(len(s) for s in strata)
        else:
            strata = spec["strata"]
            n = spec.get("n", sum(len(s) for s in strata))
        if "counts" in spec:
            return StratifiedDesign(n, strata, spec["counts"])
        if "proportions" in spec:
            return StratifiedDesign.from_proportions(n, strata, spec["proportions"])
        if "pattern" in spec:
            return StratifiedDesign.from_pattern(n, strata, spec["pattern"], spec["k"])
        raise ValueError("stratified spec needs counts, proportions, or pattern")
    if kind == "clustered":
        if "cluster_csv" in spec:
            _, groups = read_group_csv(spec["cluster_csv"])
            n = sum(len(g) for g in groups)
            cluster_of = np.empty(n, dtype=np.int64)
            for cid, members in enumerate(groups):
                cluster_of[members] = cid
        else:
            cluster_of = np.asarray(spec["cluster_of"], dtype=np.int64)
            n = len(cluster_of)
        return ClusteredDesign(n, cluster_of, build_design(spec["cluster_design"]))
    if kind == "exposure_derived":
        from .network import ExposureRules, InterferenceGraph, derive_exposure_design

        base = build_design(spec["base"])
        graph = (
            InterferenceGraph.from_csv(spec["edges_csv"], base.n)
            if "edges_csv" in spec
            else InterferenceGraph(base.n, spec["edges"])
        )
        rules = ExposureRules.from_config(spec["rules"], base.k)
        return derive_exposure_design(base, graph, rules, spec.get("undirected", False))
    raise ValueError(f"unknown design kind: {kind!r}")
