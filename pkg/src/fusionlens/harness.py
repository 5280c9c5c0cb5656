"""Evaluation protocols: top-K% masking faithfulness, importance-bin
alignment of interaction scores, and pair-level masking, plus the
classification metrics they report."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .attribution import attribute, select_top_fraction
from .interaction import (PairInteraction, SetFunctionProbe, build_universe,
                          rank_pairs, redundancy_gap, sii_mc)
from .model import FusionModel, JointSequence

__all__ = [
    "micro_f1", "macro_f1", "accuracy", "per_label_accuracy",
    "DropCurve", "faithfulness_sweep",
    "BinReport", "bin_alignment",
    "PairMaskReport", "pair_masking",
    "write_drop_curve_csv", "write_bin_report_csv",
]

DEFAULT_K = (5, 10, 15, 20, 25, 30)
EXPERT_LABEL_INDEX = {"synergy": 2, "redundancy": 1, "unique_a": 0, "unique_b": 0}
EXPERT_METRIC = {"synergy": "sii", "redundancy": "r_red"}


# -- metrics -----------------------------------------------------------------


def _check_lengths(preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    return preds, labels


def _f1(tp: float, fp: float, fn: float) -> float:
    if tp + fp + fn == 0:
        return 1.0  # no positives, no predictions
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def micro_f1(preds, labels) -> float:
    preds, labels = _check_lengths(preds, labels)
    tp = float(((preds == 1) & (labels == 1)).sum())
    fp = float(((preds == 1) & (labels == 0)).sum())
    fn = float(((preds == 0) & (labels == 1)).sum())
    return _f1(tp, fp, fn)


def macro_f1(preds, labels) -> float:
    preds, labels = _check_lengths(preds, labels)
    scores = []
    for j in range(labels.shape[1]):
        tp = float(((preds[:, j] == 1) & (labels[:, j] == 1)).sum())
        fp = float(((preds[:, j] == 1) & (labels[:, j] == 0)).sum())
        fn = float(((preds[:, j] == 0) & (labels[:, j] == 1)).sum())
        scores.append(_f1(tp, fp, fn))
    return float(np.mean(scores))


def per_label_accuracy(preds, labels) -> np.ndarray:
    preds, labels = _check_lengths(preds, labels)
    return (preds == labels).mean(axis=0)


def accuracy(preds, labels) -> float:
    return float(per_label_accuracy(preds, labels).mean())


METRICS = {"micro_f1": micro_f1, "macro_f1": macro_f1, "accuracy": accuracy}


def evaluate_metric(model: FusionModel, seq: JointSequence, metric: str) -> float:
    logits = model.predict(seq)
    preds = (logits > 0).astype(np.float64)
    return METRICS[metric](preds, seq.labels)


# -- top-K% faithfulness ------------------------------------------------------


@dataclass
class DropCurve:
    method: str
    metric: str
    m_base: float
    points: list[tuple[int, float, float]]   # (K, M_masked, delta M)
    seeds: list[int]

    @property
    def summary(self) -> float:
        """Mean drop over K values (and seeds)."""
        return float(np.mean([p[2] for p in self.points])) if self.points else 0.0


def _single(seq: JointSequence, i: int) -> JointSequence:
    return JointSequence(seq.features[i:i + 1], seq.segments, seq.valid[i:i + 1],
                         None if seq.labels is None else seq.labels[i:i + 1])


def faithfulness_sweep(model: FusionModel, seq: JointSequence, method: str,
                       seeds=(0, 1, 2), ks=DEFAULT_K, metric: str = "micro_f1",
                       ig_steps: int = 64) -> DropCurve:
    """Mask each sample's per-modality top-K% features and re-score.

    Scored methods produce one map per sample (seed-independent); the
    random baseline redraws its map per seed.  CLS is never a candidate.
    """
    if method not in ("random", "attnroll", "ig", "grad_attnroll"):
        raise ValueError(f"unknown attribution method {method!r}")
    n = seq.features.shape[0]
    m_base = evaluate_metric(model, seq, metric)
    points = []
    maps_by_seed = {}
    for seed in seeds:
        if method == "random":
            rng = np.random.default_rng(np.random.SeedSequence((seed, 0xFA17)))
            maps_by_seed[seed] = [
                attribute(model, _single(seq, i), "random", seq.labels[i:i + 1],
                          rng=rng)
                for i in range(n)
            ]
        elif seed == seeds[0]:
            maps_by_seed[seed] = [
                attribute(model, _single(seq, i), method, seq.labels[i:i + 1],
                          ig_steps=ig_steps)
                for i in range(n)
            ]
        else:
            maps_by_seed[seed] = maps_by_seed[seeds[0]]

    for k in ks:
        for seed in seeds:
            if k == 0:
                positions = [[] for _ in range(n)]
            else:
                positions = []
                for amap in maps_by_seed[seed]:
                    picked = select_top_fraction(amap, k / 100.0)
                    positions.append(sorted(p for ps in picked.values() for p in ps))
            masked = seq.mask_features(positions)
            m_masked = evaluate_metric(model, masked, metric)
            points.append((k, m_masked, m_base - m_masked))
    return DropCurve(method, metric, m_base, points, list(seeds))


# -- importance-bin alignment -------------------------------------------------


@dataclass
class BinReport:
    expert: str
    metric_key: str
    bins: dict[str, dict[int, float]]        # bin name -> {q: mean over top-q%}
    pair_counts: dict[str, int]
    empty_bins: list[str] = field(default_factory=list)


BIN_NAMES = ("top-10", "11-20", "21-30")


def _bin_slices(amap, fractions=(0.10, 0.20, 0.30)) -> list[list[tuple[int, int]]]:
    """Disjoint per-modality rank slices of the top-30% universe."""
    cuts = [select_top_fraction(amap, f) for f in fractions]
    bins = []
    prev = {m: [] for m in cuts[0]}
    for cut in cuts:
        entries = []
        for m, ps in cut.items():
            fresh = [p for p in ps if p not in prev[m]]
            entries.extend((m, p) for p in fresh)
            prev[m] = ps
        bins.append(entries)
    return bins


def bin_alignment(model: FusionModel, expert: str, seq: JointSequence,
                  mc_samples: int = 4, qs=(5, 10, 20), seed: int = 0,
                  max_samples: int = 32, scope: str = "universe") -> BinReport:
    """Score same-bin cross-modal pairs by the expert's interaction metric."""
    if expert not in EXPERT_METRIC:
        raise ValueError("bin alignment targets the synergy or redundancy expert")
    key = EXPERT_METRIC[expert]
    label_index = EXPERT_LABEL_INDEX[expert]
    n = min(max_samples, seq.features.shape[0])
    per_bin: dict[str, list[PairInteraction]] = {b: [] for b in BIN_NAMES}
    for i in range(n):
        sample = _single(seq, i)
        amap = attribute(model, sample, "grad_attnroll", sample.labels,
                         expert=expert, label_index=label_index)
        universe = build_universe(amap, 0.30, expert)
        index_of = {entry: k for k, entry in enumerate(universe.entries)}
        probe = SetFunctionProbe(model, sample, expert, sample.labels,
                                 label_index, universe, scope=scope)
        for bin_name, entries in zip(BIN_NAMES, _bin_slices(amap)):
            mods = {m for m, _ in entries}
            if len(mods) < 2:
                continue
            by_mod: dict[int, list[tuple[int, int]]] = {}
            for e in entries:
                by_mod.setdefault(e[0], []).append(e)
            mods = sorted(by_mod)
            for eu in by_mod[mods[0]]:
                for ev in by_mod[mods[1]]:
                    iu, iv = index_of[eu], index_of[ev]
                    pi = PairInteraction(expert, eu, ev, seed=seed,
                                         n_samples=mc_samples)
                    if key == "sii":
                        pi.sii = sii_mc(probe, probe.n, iu, iv, mc_samples,
                                        seed=seed + 7919 * i)
                    else:
                        base, span, rr = redundancy_gap(probe, probe.n, iu, iv,
                                                        mc_samples,
                                                        seed=seed + 7919 * i)
                        pi.base_mean, pi.span_mean, pi.r_red = base, span, rr
                    per_bin[bin_name].append(pi)

    bins = {}
    counts = {}
    empty = []
    for name in BIN_NAMES:
        pairs = per_bin[name]
        counts[name] = len(pairs)
        if not pairs:
            empty.append(name)
            bins[name] = {q: float("nan") for q in qs}
            continue
        bins[name] = {
            q: float(np.mean([getattr(p, key)
                              for p in rank_pairs(pairs, key, q / 100.0)]))
            for q in qs
        }
    return BinReport(expert, key, bins, counts, empty)


# -- pair-level masking -------------------------------------------------------


@dataclass
class PairMaskReport:
    expert: str
    rule: str                      # random | sii | r_red
    budget: float
    metric: str
    m_before: float
    m_after: float
    seeds: list[int]
    pairs_masked_per_sample: list[int] = field(default_factory=list)

    @property
    def drop(self) -> float:
        return self.m_before - self.m_after


def pair_masking(model: FusionModel, expert: str, seq: JointSequence,
                 rule: str, budget: float = 0.05, seeds=(0,),
                 metric: str = "micro_f1", mc_samples: int = 8,
                 pool_fraction: float = 0.10, max_samples: int | None = None,
                 scope: str = "universe") -> PairMaskReport:
    """Jointly zero selected cross-modal pairs from each sample's top pool.

    The candidate pool is the per-modality top fraction of that sample's
    expert-wise importance map; both rules draw the same number of pairs
    from the same pool, so any drop difference is pair-level signal.
    """
    if rule not in ("random", "sii", "r_red"):
        raise ValueError(f"unknown pair selection rule {rule!r}")
    label_index = EXPERT_LABEL_INDEX[expert]
    n = seq.features.shape[0] if max_samples is None else min(
        max_samples, seq.features.shape[0])
    work = seq.select(np.arange(n))
    m_before = evaluate_metric(model, work, metric)

    # Pools and (for scored rules) rankings are seed-independent;
    # compute once.
    pools = []
    scored: list[list[PairInteraction] | None] = []
    universes = []
    for i in range(n):
        sample = _single(work, i)
        amap = attribute(model, sample, "grad_attnroll", sample.labels,
                         expert=expert, label_index=label_index)
        universe = build_universe(amap, pool_fraction, expert)
        universes.append(universe)
        pairs = universe.cross_modal_pairs()
        pools.append(pairs)
        if rule in ("sii", "r_red") and pairs:
            probe = SetFunctionProbe(model, sample, expert, sample.labels,
                                     label_index, universe, scope=scope)
            ranked = []
            for iu, iv in pairs:
                pi = PairInteraction(expert, universe.entries[iu],
                                     universe.entries[iv])
                if rule == "sii":
                    pi.sii = sii_mc(probe, probe.n, iu, iv, mc_samples,
                                    seed=104729 + i)
                else:
                    b, s, rr = redundancy_gap(probe, probe.n, iu, iv, mc_samples,
                                              seed=104729 + i)
                    pi.base_mean, pi.span_mean, pi.r_red = b, s, rr
                ranked.append(pi)
            scored.append(rank_pairs(ranked, rule, 1.0))
        else:
            scored.append(None)

    drops = []
    counts = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9A12)))
        positions = []
        for i in range(n):
            pairs = pools[i]
            if not pairs:
                raise ValueError(f"empty candidate pool for sample {i}")
            n_mask = int(np.ceil(budget * len(pairs)))
            if n_mask == 0:
                positions.append([])
                continue
            if rule == "random":
                chosen_idx = rng.choice(len(pairs), size=n_mask, replace=False)
                chosen = [pairs[int(j)] for j in chosen_idx]
                entries = universes[i].entries
                picked = [(entries[a], entries[b]) for a, b in chosen]
            else:
                picked = [(p.u, p.v) for p in scored[i][:n_mask]]
            pos = sorted({p for pair in picked for (_, p) in pair})
            positions.append(pos)
            counts.append(n_mask)
        masked = work.mask_features(positions)
        drops.append(evaluate_metric(model, masked, metric))
    m_after = float(np.mean(drops))
    return PairMaskReport(expert, rule, budget, metric, m_before, m_after,
                          list(seeds), counts)


# -- report export ------------------------------------------------------------


def write_drop_curve_csv(curves: list[DropCurve], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", "k_percent", "m_base", "m_masked", "delta_m"])
        for c in curves:
            for k, masked, delta in c.points:
                w.writerow([c.method, c.metric, k,
                            f"{c.m_base:.6f}", f"{masked:.6f}", f"{delta:.6f}"])


def write_bin_report_csv(reports: list[BinReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["expert", "metric", "bin", "q_percent", "mean_value", "n_pairs"])
        for r in reports:
            for name, by_q in r.bins.items():
                for q, val in by_q.items():
                    w.writerow([r.expert, r.metric_key, name, q,
                                f"{val:.6f}", r.pair_counts[name]])
