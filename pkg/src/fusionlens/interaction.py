"""Pairwise interaction scores over a masked coalition game.

A coalition game is played over a per-sample feature universe (the top
fraction of positions per modality under an attribution map): universe
features outside the active coalition are zeroed, everything else keeps its
original value (a ``global`` scope that zeroes all non-coalition features is
available too).  The scalar payoff is an expert's signed true-class logit.

Scores:

* Shapley Interaction Index via exact enumeration or a size-stratified
  Monte Carlo estimator whose expectation matches the exact index,
* a redundancy gap  base_mean / (1 + span_mean)  that is large when either
  feature alone nearly matches the joint effect.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import numpy as np

from .attribution import AttributionMap, select_top_fraction
from .model import FusionModel, JointSequence

__all__ = [
    "FeatureUniverse",
    "PairInteraction",
    "SetFunctionProbe",
    "build_universe",
    "delta_pair",
    "sii_exact",
    "sii_mc",
    "redundancy_gap",
    "rank_pairs",
    "sii_weight_sum",
]

CACHE_LIMIT = 1 << 16


@dataclass
class FeatureUniverse:
    expert: str
    entries: list[tuple[int, int]]   # (modality, position), attribution order
    rho: float

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("duplicate universe entries")

    @property
    def size(self) -> int:
        return len(self.entries)

    def cross_modal_pairs(self) -> list[tuple[int, int]]:
        """Index pairs (i, j) whose entries span two distinct modalities."""
        return [
            (i, j)
            for i, j in combinations(range(self.size), 2)
            if self.entries[i][0] != self.entries[j][0]
        ]


def build_universe(amap: AttributionMap, rho: float,
                   expert: str | None = None) -> FeatureUniverse:
    """Top-``rho`` fraction of valid positions per modality, best first."""
    picked = select_top_fraction(amap, rho)
    entries = [(m, p) for m in sorted(picked) for p in picked[m]]
    return FeatureUniverse(expert or (amap.expert or "mixture"), entries, rho)


@dataclass
class PairInteraction:
    expert: str
    u: tuple[int, int]             # (modality, position)
    v: tuple[int, int]
    sii: float = 0.0
    base_mean: float = 0.0
    span_mean: float = 0.0
    r_red: float = 0.0
    n_samples: int = 0
    seed: int = 0


class SetFunctionProbe:
    """Pure coalition-indexed evaluation of one expert on one sample.

    The payoff is the expert's logit for the target label, signed toward
    the true class.  Evaluations are cached (LRU) by coalition bit-set.
    """

    def __init__(self, model: FusionModel, seq: JointSequence, expert: str,
                 labels: np.ndarray, label_index: int,
                 universe: FeatureUniverse, scope: str = "universe"):
        if seq.features.shape[0] != 1:
            raise ValueError("probe binds a single sample")
        if scope not in ("universe", "global"):
            raise ValueError(f"unknown masking scope {scope!r}")
        self.model = model
        self.seq = seq
        self.expert = expert
        self.labels = labels
        self.label_index = label_index
        self.universe = universe
        self.scope = scope
        self._cache: OrderedDict[int, float] = OrderedDict()
        self.cache_hits = 0
        self.evaluations = 0
        self._positions = [p for _, p in universe.entries]
        self._sign = 2.0 * labels[0, label_index] - 1.0

    @property
    def n(self) -> int:
        return self.universe.size

    def _key(self, coalition) -> int:
        key = 0
        for i in coalition:
            if i < 0 or i >= self.n:
                raise ValueError(f"coalition member {i} outside universe")
            key |= 1 << i
        return key

    def _masked_features(self, coalition: frozenset) -> np.ndarray:
        feats = self.seq.features.copy()
        if self.scope == "global":
            keep = {0} | {self._positions[i] for i in coalition}
            drop = [p for p in range(self.seq.n_positions)
                    if p not in keep and self.seq.valid[0, p]]
        else:
            drop = [self._positions[i] for i in range(self.n)
                    if i not in coalition]
        if drop:
            feats[0, drop, :] = 0.0
        return feats

    def _forward_values(self, feats: np.ndarray) -> np.ndarray:
        sub = JointSequence(feats, self.seq.segments,
                            np.repeat(self.seq.valid, feats.shape[0], axis=0))
        bundle = self.model.forward(sub, only_expert=self.expert)
        logits = bundle.expert_logits[self.expert].data
        return self._sign * logits[:, self.label_index]

    def __call__(self, coalition) -> float:
        return self.evaluate(coalition)

    def evaluate(self, coalition) -> float:
        coalition = frozenset(coalition)
        key = self._key(coalition)
        if key in self._cache:
            self.cache_hits += 1
            self._cache.move_to_end(key)
            return self._cache[key]
        value = float(self._forward_values(self._masked_features(coalition))[0])
        self._store(key, value)
        return value

    def prefetch(self, coalitions) -> None:
        """Batch-evaluate any uncached coalitions in one forward pass."""
        todo = []
        seen = set()
        for c in coalitions:
            c = frozenset(c)
            key = self._key(c)
            if key not in self._cache and key not in seen:
                seen.add(key)
                todo.append((key, c))
        if not todo:
            return
        feats = np.concatenate([self._masked_features(c) for _, c in todo], axis=0)
        values = self._forward_values(feats)
        for (key, _), val in zip(todo, values):
            self._store(key, float(val))

    def _store(self, key: int, value: float) -> None:
        self.evaluations += 1
        self._cache[key] = value
        if len(self._cache) > CACHE_LIMIT:
            self._cache.popitem(last=False)


def delta_pair(f, u: int, v: int, coalition) -> float:
    """f(S+uv) - f(S+u) - f(S+v) + f(S) for S excluding u and v."""
    s = frozenset(coalition)
    if u in s or v in s:
        raise ValueError("coalition must exclude the probed pair")
    return (f(s | {u, v}) - f(s | {u}) - f(s | {v}) + f(s))


def sii_exact(f, n: int, u: int, v: int) -> float:
    """Exact Shapley Interaction Index by coalition enumeration (n <= 20)."""
    if n > 20:
        raise ValueError("exact enumeration is bounded at n = 20 features")
    if u == v or not (0 <= u < n and 0 <= v < n):
        raise ValueError("u, v must be distinct universe members")
    rest = [i for i in range(n) if i not in (u, v)]
    denom = 2 * math.factorial(n)
    total = 0.0
    for size in range(len(rest) + 1):
        weight = math.factorial(size) * math.factorial(n - size - 2) / denom
        for combo in combinations(rest, size):
            total += weight * delta_pair(f, u, v, combo)
    return total


def sii_weight_sum(n: int) -> Fraction:
    """Sum of the exact coalition weights under rational arithmetic."""
    total = Fraction(0)
    denom = 2 * math.factorial(n)
    for size in range(n - 1):
        count = math.comb(n - 2, size)
        total += count * Fraction(math.factorial(size) * math.factorial(n - size - 2),
                                  denom)
    return total


def _sample_coalitions(rng, rest: list[int], n_samples: int, stratified: bool):
    coalitions = []
    for _ in range(n_samples):
        if stratified:
            size = int(rng.integers(0, len(rest) + 1))
            members = rng.choice(rest, size=size, replace=False) if size else []
        else:
            members = [i for i in rest if rng.random() < 0.5]
        coalitions.append(frozenset(int(m) for m in members))
    return coalitions


def sii_mc(f, n: int, u: int, v: int, n_samples: int, seed: int = 0,
           stratified: bool = True) -> float:
    """Monte Carlo Shapley Interaction Index.

    Stratified (default): draw |S| uniformly, then S uniformly at that
    size; the per-size exact Shapley mass is constant, so mean(delta)/(2n)
    targets the exact index.  Unstratified: subsets uniform at random and
    the plain empirical mean of delta is returned (ranking-compatible but
    differently normalized).
    """
    if n_samples < 1 or n < 2:
        raise ValueError("need n_samples >= 1 and a universe of >= 2 features")
    rng = np.random.default_rng(np.random.SeedSequence((seed, u, v)))
    rest = [i for i in range(n) if i not in (u, v)]
    coalitions = _sample_coalitions(rng, rest, n_samples, stratified)
    prefetch = getattr(f, "prefetch", None)
    if prefetch is not None:
        prefetch([s | extra for s in coalitions
                  for extra in (frozenset(), {u}, {v}, {u, v})])
    deltas = [delta_pair(f, u, v, s) for s in coalitions]
    mean = float(np.mean(deltas))
    return mean / (2 * n) if stratified else mean


def redundancy_gap(f, n: int, u: int, v: int, n_samples: int,
                   seed: int = 0) -> tuple[float, float, float]:
    """(base_mean, span_mean, r_red) over uniformly sampled coalitions."""
    if n_samples < 1 or n < 2:
        raise ValueError("need n_samples >= 1 and a universe of >= 2 features")
    rng = np.random.default_rng(np.random.SeedSequence((seed, u, v, 0x6ED)))
    rest = [i for i in range(n) if i not in (u, v)]
    coalitions = _sample_coalitions(rng, rest, n_samples, stratified=False)
    prefetch = getattr(f, "prefetch", None)
    if prefetch is not None:
        prefetch([s | extra for s in coalitions
                  for extra in (frozenset(), {u}, {v}, {u, v})])
    bases, spans = [], []
    for s in coalitions:
        f0 = f(s)
        g_u = f(s | {u}) - f0
        g_v = f(s | {v}) - f0
        g_uv = f(s | {u, v}) - f0
        g_max = max(g_u, g_v)
        bases.append(max(0.0, min(g_uv, g_max)))
        spans.append(abs(g_uv - g_max))
    base_mean = float(np.mean(bases))
    span_mean = float(np.mean(spans))
    return base_mean, span_mean, base_mean / (1.0 + span_mean)


def score_pair(probe: SetFunctionProbe, i: int, j: int, n_samples: int,
               seed: int = 0) -> PairInteraction:
    """Both interaction scores for one cross-modal universe pair."""
    u_entry = probe.universe.entries[i]
    v_entry = probe.universe.entries[j]
    if u_entry[0] == v_entry[0]:
        raise ValueError("pair must span two distinct modalities")
    sii = sii_mc(probe, probe.n, i, j, n_samples, seed)
    base, span, r_red = redundancy_gap(probe, probe.n, i, j, n_samples, seed)
    return PairInteraction(probe.expert, u_entry, v_entry, sii=sii,
                           base_mean=base, span_mean=span, r_red=r_red,
                           n_samples=n_samples, seed=seed)


def rank_pairs(interactions: list[PairInteraction], key: str,
               top_q: float = 1.0) -> list[PairInteraction]:
    """Descending by ``key`` (sii or r_red); ties break lexicographically."""
    if not interactions:
        raise ValueError("no interactions to rank")
    if key not in ("sii", "r_red"):
        raise ValueError(f"unknown ranking key {key!r}")
    ordered = sorted(interactions, key=lambda p: (-getattr(p, key), p.u, p.v))
    k = int(np.ceil(top_q * len(ordered)))
    return ordered[:k]
