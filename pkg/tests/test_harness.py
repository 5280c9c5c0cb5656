"""Metric hand cases and contracts for the evaluation protocols."""

import csv

import numpy as np
import pytest

from fusionlens.harness import (BinReport, DropCurve, PairMaskReport,
                                accuracy, bin_alignment, faithfulness_sweep,
                                macro_f1, micro_f1, pair_masking,
                                per_label_accuracy, write_bin_report_csv,
                                write_drop_curve_csv)

# -- metrics -------------------------------------------------------------


def test_micro_f1_hand_case():
    # tp=2, fp=1, fn=1 -> 2*2 / (4+1+1) = 2/3
    preds = np.array([[1, 1], [1, 0], [0, 0]])
    labels = np.array([[1, 0], [1, 1], [0, 0]])
    assert micro_f1(preds, labels) == pytest.approx(2 / 3)


def test_macro_f1_mixed_labels():
    # label 0 perfect (F1=1.0), label 1 half right (tp=1, fp=0, fn=1 -> 2/3)
    preds = np.array([[1, 1], [0, 0], [1, 0]])
    labels = np.array([[1, 1], [0, 0], [1, 1]])
    assert macro_f1(preds, labels) == pytest.approx((1.0 + 2 / 3) / 2)


def test_macro_f1_perfect_and_half():
    # label 0: F1 = 1.0; label 1: tp=1, fp=1, fn=1 -> F1 = 0.5; macro = 0.75
    preds = np.array([[1, 1], [0, 1], [1, 0], [0, 0]])
    labels = np.array([[1, 1], [0, 0], [1, 1], [0, 0]])
    assert macro_f1(preds, labels) == pytest.approx(0.75)


def test_f1_zero_division_is_one():
    # no positives and no positive predictions: vacuous, F1 = 1.0
    preds = np.zeros((4, 2))
    labels = np.zeros((4, 2))
    assert micro_f1(preds, labels) == 1.0
    assert macro_f1(preds, labels) == 1.0


def test_f1_all_missed_is_zero():
    preds = np.zeros((4, 1))
    labels = np.ones((4, 1))
    assert micro_f1(preds, labels) == 0.0
    assert macro_f1(preds, labels) == 0.0


def test_per_label_accuracy_and_mean():
    preds = np.array([[1, 0], [0, 0]])
    labels = np.array([[1, 1], [1, 0]])
    acc = per_label_accuracy(preds, labels)
    assert acc.tolist() == [0.5, 0.5]
    assert accuracy(preds, labels) == pytest.approx(0.5)


def test_metric_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape mismatch"):
        micro_f1(np.zeros((3, 2)), np.zeros((2, 2)))


# -- faithfulness sweep ---------------------------------------------------


@pytest.fixture(scope="module")
def small_seq(tiny_model, tiny_samples):
    return tiny_model.encode_samples(tiny_samples[:8])


def test_faithfulness_unknown_method(tiny_model, small_seq):
    with pytest.raises(ValueError, match="unknown attribution method"):
        faithfulness_sweep(tiny_model, small_seq, "saliency")


def test_faithfulness_k0_zero_drop(tiny_model, small_seq):
    curve = faithfulness_sweep(tiny_model, small_seq, "attnroll",
                               seeds=(0,), ks=(0,))
    assert curve.points == [(0, curve.m_base, 0.0)]
    assert curve.summary == 0.0


def test_faithfulness_deterministic(tiny_model, small_seq):
    a = faithfulness_sweep(tiny_model, small_seq, "grad_attnroll",
                           seeds=(0, 1), ks=(10,))
    b = faithfulness_sweep(tiny_model, small_seq, "grad_attnroll",
                           seeds=(0, 1), ks=(10,))
    assert a.points == b.points
    assert a.m_base == b.m_base


def test_faithfulness_scored_maps_seed_independent(tiny_model, small_seq):
    # scored methods reuse one map: both seeds yield identical points
    curve = faithfulness_sweep(tiny_model, small_seq, "ig", seeds=(0, 7),
                               ks=(10,), ig_steps=8)
    (k0, m0, d0), (k1, m1, d1) = curve.points
    assert (k0, m0, d0) == (k1, m1, d1)


def test_faithfulness_random_varies_with_seed(tiny_model, small_seq):
    curve = faithfulness_sweep(tiny_model, small_seq, "random",
                               seeds=(0, 1, 2, 3), ks=(25,))
    masked = {round(m, 12) for _, m, _ in curve.points}
    assert len(masked) > 1  # different random maps mask different positions


def test_drop_curve_summary_mean():
    curve = DropCurve("ig", "micro_f1", 0.9,
                      [(5, 0.8, 0.1), (10, 0.6, 0.3)], [0])
    assert curve.summary == pytest.approx(0.2)


def test_drop_curve_csv_round_trip(tmp_path):
    curve = DropCurve("ig", "micro_f1", 0.9, [(5, 0.8, 0.1)], [0])
    path = tmp_path / "faith.csv"
    write_drop_curve_csv([curve], path)
    rows = list(csv.reader(open(path, encoding="utf-8")))
    assert rows[0] == ["method", "metric", "k_percent", "m_base",
                       "m_masked", "delta_m"]
    assert rows[1] == ["ig", "micro_f1", "5", "0.900000", "0.800000",
                       "0.100000"]


# -- bin alignment --------------------------------------------------------


def test_bin_alignment_rejects_unknown_expert(tiny_model, small_seq):
    with pytest.raises(ValueError, match="synergy or redundancy"):
        bin_alignment(tiny_model, "unique_a", small_seq)


def test_bin_alignment_structure(tiny_model, small_seq):
    rep = bin_alignment(tiny_model, "synergy", small_seq, mc_samples=2,
                        qs=(50, 100), max_samples=3)
    assert rep.expert == "synergy" and rep.metric_key == "sii"
    assert set(rep.bins) == {"top-10", "11-20", "21-30"}
    for name, by_q in rep.bins.items():
        assert set(by_q) == {50, 100}
        if rep.pair_counts[name] == 0:
            assert name in rep.empty_bins
        else:
            assert all(np.isfinite(v) for v in by_q.values())


def test_bin_alignment_q_full_is_plain_mean(tiny_model, small_seq):
    rep = bin_alignment(tiny_model, "redundancy", small_seq, mc_samples=2,
                        qs=(100,), max_samples=2)
    assert rep.metric_key == "r_red"
    # q=100% keeps every pair, so the reported value is the plain mean;
    # it must be finite whenever the bin is non-empty
    for name in rep.bins:
        if rep.pair_counts[name]:
            assert np.isfinite(rep.bins[name][100])


def test_bin_alignment_deterministic(tiny_model, small_seq):
    a = bin_alignment(tiny_model, "synergy", small_seq, mc_samples=2,
                      qs=(100,), max_samples=2, seed=5)
    b = bin_alignment(tiny_model, "synergy", small_seq, mc_samples=2,
                      qs=(100,), max_samples=2, seed=5)
    assert a.bins == b.bins and a.pair_counts == b.pair_counts


def test_bin_report_csv(tmp_path):
    rep = BinReport("synergy", "sii",
                    {"top-10": {5: 0.25}, "11-20": {5: 0.0},
                     "21-30": {5: float("nan")}},
                    {"top-10": 2, "11-20": 1, "21-30": 0}, ["21-30"])
    path = tmp_path / "bins.csv"
    write_bin_report_csv([rep], path)
    rows = list(csv.reader(open(path, encoding="utf-8")))
    assert rows[0] == ["expert", "metric", "bin", "q_percent",
                       "mean_value", "n_pairs"]
    assert rows[1] == ["synergy", "sii", "top-10", "5", "0.250000", "2"]
    assert rows[3][4] == "nan"


# -- pair masking ---------------------------------------------------------


def test_pair_masking_unknown_rule(tiny_model, small_seq):
    with pytest.raises(ValueError, match="unknown pair selection rule"):
        pair_masking(tiny_model, "synergy", small_seq, "importance")


def test_pair_masking_budget_ceil(tiny_model, small_seq):
    # every sample's pool is non-empty at pool_fraction 0.5 on 8+8 tokens,
    # and ceil(0.05 * len(pool)) >= 1, so each sample masks at least a pair
    rep = pair_masking(tiny_model, "synergy", small_seq, "random",
                       budget=0.05, seeds=(0,), pool_fraction=0.5,
                       max_samples=4)
    assert len(rep.pairs_masked_per_sample) == 4
    assert all(c >= 1 for c in rep.pairs_masked_per_sample)


def test_pair_masking_rules_share_budget(tiny_model, small_seq):
    kw = dict(budget=0.25, seeds=(0,), pool_fraction=0.5, max_samples=3,
              mc_samples=2)
    rnd = pair_masking(tiny_model, "synergy", small_seq, "random", **kw)
    sii = pair_masking(tiny_model, "synergy", small_seq, "sii", **kw)
    assert rnd.pairs_masked_per_sample == sii.pairs_masked_per_sample
    assert rnd.m_before == sii.m_before


def test_pair_masking_deterministic(tiny_model, small_seq):
    kw = dict(budget=0.1, seeds=(0, 1), pool_fraction=0.5, max_samples=3)
    a = pair_masking(tiny_model, "synergy", small_seq, "random", **kw)
    b = pair_masking(tiny_model, "synergy", small_seq, "random", **kw)
    assert a.m_after == b.m_after and a.drop == b.drop


def test_pair_masking_drop_property():
    rep = PairMaskReport("synergy", "sii", 0.05, "micro_f1",
                         0.9, 0.7, [0])
    assert rep.drop == pytest.approx(0.2)
