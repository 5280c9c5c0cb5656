"""Shapley Interaction Index and redundancy-gap oracles, the MC estimator,
probe caching semantics, and pair ranking."""

import math
from fractions import Fraction

import numpy as np
import pytest

from fusionlens.attribution import AttributionMap
from fusionlens.interaction import (FeatureUniverse, PairInteraction,
                                    SetFunctionProbe, build_universe,
                                    delta_pair, rank_pairs, redundancy_gap,
                                    sii_exact, sii_mc, sii_weight_sum)


def xor_f(s):
    return float(0 in s and 1 in s) - float(0 in s and 1 in s and False)


def make_xor(u=0, v=1):
    return lambda s: float(u in s) * float(v in s)


def make_and(u=0, v=1):
    return lambda s: float(u in s and v in s)


def make_or(u=0, v=1):
    return lambda s: float(u in s or v in s)


def make_additive(weights):
    return lambda s: float(sum(weights[i] for i in s))


def random_bounded_f(n, rng):
    """Random bounded set function with genuine pairwise interactions.

    Linear + quadratic terms carry the interaction signal; a small tanh
    perturbation adds higher-order structure so the MC estimate is not
    trivially exact.  Values are bounded on the 2^n domain.
    """
    w = rng.normal(scale=0.5, size=n)
    b = rng.normal(scale=0.5, size=(n, n))
    b = (b + b.T) / 2
    u = rng.normal(scale=1.0, size=n)

    def f(s):
        x = np.zeros(n)
        for i in s:
            x[i] = 1.0
        return float(w @ x + x @ b @ x / 2 + 0.1 * np.tanh(u @ x))

    return f


# -- delta --------------------------------------------------------------------


def test_delta_additive_zero():
    f = make_additive([1.0, -2.0, 0.5])
    assert delta_pair(f, 0, 1, {2}) == 0.0
    assert delta_pair(f, 0, 1, set()) == 0.0


def test_delta_and_or_truth_tables():
    assert delta_pair(make_and(), 0, 1, set()) == 1.0
    assert delta_pair(make_or(), 0, 1, set()) == -1.0


def test_delta_rejects_overlapping_coalition():
    with pytest.raises(ValueError):
        delta_pair(make_and(), 0, 1, {1})


# -- exact SII ----------------------------------------------------------------


def test_sii_exact_xor_n2():
    assert abs(sii_exact(make_xor(), 2, 0, 1) - 0.25) <= 1e-12


def test_sii_exact_and_n3():
    assert abs(sii_exact(make_and(), 3, 0, 1) - 1.0 / 6.0) <= 1e-12


def test_sii_exact_additive_zero():
    f = make_additive([0.25, -1.5, 2.0, 0.75])
    for u, v in ((0, 1), (1, 3), (2, 3)):
        assert abs(sii_exact(f, 4, u, v)) <= 1e-12


def test_sii_exact_validates_arguments():
    with pytest.raises(ValueError):
        sii_exact(make_and(), 21, 0, 1)
    with pytest.raises(ValueError):
        sii_exact(make_and(), 4, 2, 2)


def test_weight_identity_rational_up_to_12():
    for n in range(2, 13):
        assert sii_weight_sum(n) == Fraction(1, 2 * n)


# -- MC estimator ----------------------------------------------------------------


def test_sii_mc_n2_is_exact_for_any_sample_count():
    for n_samples in (1, 7, 100):
        assert sii_mc(make_xor(), 2, 0, 1, n_samples, seed=0) == 0.25


def test_sii_mc_additive_exact_zero():
    f = make_additive([0.5, 1.5, -0.75, 2.0, 0.125])
    assert sii_mc(f, 5, 0, 3, 200, seed=1) == 0.0


def test_sii_mc_deterministic_given_seed():
    rng = np.random.default_rng(0)
    f = random_bounded_f(8, rng)
    a = sii_mc(f, 8, 1, 5, 500, seed=42)
    b = sii_mc(f, 8, 1, 5, 500, seed=42)
    assert a == b
    assert a != sii_mc(f, 8, 1, 5, 500, seed=43)


def test_sii_mc_matches_exact_oracle():
    """20 random bounded functions, 5 seeds, n=10, 2000 MC samples."""
    rng = np.random.default_rng(2024)
    errs_2000, errs_250 = [], []
    for _ in range(20):
        f = random_bounded_f(10, rng)
        exact = sii_exact(f, 10, 0, 1)
        tol = 0.05 * max(abs(exact), 0.01)
        for seed in range(5):
            est = sii_mc(f, 10, 0, 1, 2000, seed=seed)
            errs_2000.append(abs(est - exact))
            errs_250.append(abs(sii_mc(f, 10, 0, 1, 250, seed=seed) - exact))
            assert abs(est - exact) <= tol
    assert np.mean(errs_2000) < np.mean(errs_250)


def test_sii_mc_consistency_as_samples_double():
    rng = np.random.default_rng(7)
    fs = [random_bounded_f(9, rng) for _ in range(10)]
    exacts = [sii_exact(f, 9, 0, 1) for f in fs]
    maes = []
    for n_samples in (250, 500, 1000, 2000):
        errs = [abs(sii_mc(f, 9, 0, 1, n_samples, seed=s) - e)
                for f, e in zip(fs, exacts) for s in range(3)]
        maes.append(np.mean(errs))
    assert maes[-1] < maes[0]


def test_sii_scale_equivariance():
    rng = np.random.default_rng(5)
    f = random_bounded_f(7, rng)
    g = lambda s: 3.5 * f(s)
    for u, v in ((0, 1), (2, 6)):
        assert abs(sii_exact(g, 7, u, v) - 3.5 * sii_exact(f, 7, u, v)) <= 1e-12
        assert abs(sii_mc(g, 7, u, v, 300, seed=1)
                   - 3.5 * sii_mc(f, 7, u, v, 300, seed=1)) <= 1e-12


def test_sii_mc_unstratified_preserves_sign_on_oracles():
    assert sii_mc(make_xor(), 4, 0, 1, 400, seed=0, stratified=False) > 0
    assert sii_mc(make_additive([1.0] * 4), 4, 0, 1, 400, seed=0,
                  stratified=False) == 0.0


# -- redundancy gap -----------------------------------------------------------


def test_redundancy_gap_duplicated_evidence():
    base, span, r_red = redundancy_gap(make_or(), 2, 0, 1, 50, seed=0)
    assert (base, span, r_red) == (1.0, 0.0, 1.0)


def test_redundancy_gap_pure_synergy():
    base, span, r_red = redundancy_gap(make_xor(), 2, 0, 1, 50, seed=0)
    assert (base, span, r_red) == (0.0, 1.0, 0.0)


def test_redundancy_gap_additive():
    f = lambda s: float(len(s))
    base, span, r_red = redundancy_gap(f, 2, 0, 1, 50, seed=0)
    assert (base, span, r_red) == (1.0, 1.0, 0.5)


def test_redundancy_gap_bounds():
    rng = np.random.default_rng(9)
    for _ in range(10):
        f = random_bounded_f(6, rng)
        base, span, r_red = redundancy_gap(f, 6, 0, 5, 64, seed=3)
        assert 0.0 <= r_red <= base + 1e-12
        assert span >= 0.0


# -- universes and probes -------------------------------------------------------


def _toy_map(scores, segments, valid):
    return AttributionMap(expert="synergy", method="grad_attnroll",
                          raw=np.asarray(scores, dtype=float),
                          normalized=np.asarray(scores, dtype=float),
                          segments=np.asarray(segments), valid=np.asarray(valid))


def test_build_universe_orders_by_modality_then_score():
    segments = np.array([-1, 0, 0, 0, 1, 1, 1])
    valid = np.ones(7, dtype=bool)
    amap = _toy_map([0, 0.9, 0.1, 0.5, 0.2, 0.8, 0.4], segments, valid)
    uni = build_universe(amap, 2 / 3)
    assert uni.entries == [(0, 1), (0, 3), (1, 5), (1, 6)]
    assert uni.cross_modal_pairs() == [(0, 2), (0, 3), (1, 2), (1, 3)]


def test_universe_rejects_duplicates():
    with pytest.raises(ValueError):
        FeatureUniverse("synergy", [(0, 1), (0, 1)], 0.5)


@pytest.fixture()
def probe(tiny_model, tiny_seq):
    seq = tiny_seq.select([0])
    segments = tiny_seq.segments
    entries = [(0, 1), (0, 2), (1, 9), (1, 10)]
    universe = FeatureUniverse("synergy", entries, 0.25)
    return SetFunctionProbe(tiny_model, seq, "synergy", seq.labels, 2, universe)


def test_probe_full_coalition_matches_plain_forward(probe, tiny_model, tiny_seq):
    seq = tiny_seq.select([0])
    bundle = tiny_model.forward(seq, only_expert="synergy")
    sign = 2.0 * seq.labels[0, 2] - 1.0
    expected = sign * bundle.expert_logits["synergy"].data[0, 2]
    assert abs(probe(range(4)) - expected) <= 1e-12


def test_probe_empty_coalition_zeroes_universe(probe, tiny_model, tiny_seq):
    seq = tiny_seq.select([0]).mask_features([1, 2, 9, 10])
    bundle = tiny_model.forward(seq, only_expert="synergy")
    sign = 2.0 * seq.labels[0, 2] - 1.0
    expected = sign * bundle.expert_logits["synergy"].data[0, 2]
    assert abs(probe(set()) - expected) <= 1e-12


def test_probe_cache_hit_counter(probe):
    v1 = probe({0, 2})
    hits = probe.cache_hits
    v2 = probe({2, 0})
    assert v1 == v2
    assert probe.cache_hits == hits + 1
    assert probe.evaluations == 1


def test_probe_prefetch_matches_single_evaluations(probe):
    coalitions = [frozenset(), {0}, {1}, {0, 1}, {0, 2, 3}]
    probe.prefetch(coalitions)
    evals = probe.evaluations
    batched = [probe(c) for c in coalitions]
    assert probe.evaluations == evals  # all were cache hits
    fresh = SetFunctionProbe(probe.model, probe.seq, probe.expert, probe.labels,
                             probe.label_index, probe.universe)
    singles = [fresh(c) for c in coalitions]
    np.testing.assert_allclose(batched, singles, atol=1e-12)


def test_probe_rejects_out_of_universe_members(probe):
    with pytest.raises(ValueError):
        probe({0, 7})


def test_probe_global_scope_zeroes_everything_outside_coalition(
        tiny_model, tiny_seq):
    seq = tiny_seq.select([0])
    universe = FeatureUniverse("synergy", [(0, 1), (1, 9)], 0.1)
    g = SetFunctionProbe(tiny_model, seq, "synergy", seq.labels, 2,
                         universe, scope="global")
    everything = [p for p in range(1, seq.n_positions) if seq.valid[0, p]]
    masked = seq.mask_features(everything)
    bundle = tiny_model.forward(masked, only_expert="synergy")
    sign = 2.0 * seq.labels[0, 2] - 1.0
    assert abs(g(set()) - sign * bundle.expert_logits["synergy"].data[0, 2]) <= 1e-12


def test_probe_requires_single_sample(tiny_model, tiny_seq):
    with pytest.raises(ValueError):
        SetFunctionProbe(tiny_model, tiny_seq, "synergy", tiny_seq.labels, 2,
                         FeatureUniverse("synergy", [(0, 1), (1, 9)], 0.1))


# -- ranking --------------------------------------------------------------------


def _pair(u, v, **kv):
    return PairInteraction("synergy", u, v, **kv)


def test_rank_pairs_full_sorted_list():
    pairs = [_pair((0, 1), (1, 9), sii=0.1), _pair((0, 2), (1, 9), sii=0.3)]
    ranked = rank_pairs(pairs, "sii", 1.0)
    assert [p.sii for p in ranked] == [0.3, 0.1]


def test_rank_pairs_top_half():
    pairs = [_pair((0, 1), (1, 9), sii=0.3), _pair((0, 2), (1, 9), sii=0.1)]
    ranked = rank_pairs(pairs, "sii", 0.5)
    assert len(ranked) == 1 and ranked[0].sii == 0.3


def test_rank_pairs_lexicographic_ties():
    pairs = [_pair((0, 5), (1, 9), sii=0.2), _pair((0, 1), (1, 9), sii=0.2)]
    ranked = rank_pairs(pairs, "sii", 1.0)
    assert ranked[0].u == (0, 1)


def test_rank_pairs_rejects_bad_key_or_empty():
    with pytest.raises(ValueError):
        rank_pairs([], "sii")
    with pytest.raises(ValueError):
        rank_pairs([_pair((0, 1), (1, 9))], "gap")
