import itertools
from fractions import Fraction

import numpy as np
import pytest

from msme.attention import MarkerAvailability
from msme.errors import ContractError, DimensionError, InfeasibilityError
from msme.evaluation import (CombinationLattice, ConfusionCounts, MetricTable, analyze_recalibration,
                             combination_name, compute_M_total, compute_M_UB, confusion,
                             evaluate_model, f1, parse_combination, predict_sample,
                             quantify_fraction, relative_scores)
from msme.models import ModelConfig, build_model, geometry_for
from msme.data import SampleRecord


def _powerset_oracle(assignment, K):
    """Enumerate subsets as marker tuples, independent of bitmask tricks."""
    sets = [frozenset(a) for a in assignment]
    union = frozenset().union(*sets)
    subsets = [frozenset(c) for r in range(1, K + 1) for c in itertools.combinations(range(1, K + 1), r)]
    ub = {g for g in subsets if any(g <= s for s in sets)}
    total = {g for g in subsets if g <= union}
    return ub, total


def _to_sets(masks):
    return {frozenset(k + 1 for k in range(8) if (m >> k) & 1) for m in masks}


def test_lattice_matches_powerset_oracle():
    rng = np.random.default_rng(0)
    for trial in range(100):
        K = int(rng.integers(1, 7))
        n = int(rng.integers(1, 6))
        assignment = []
        for _ in range(n):
            k = int(rng.integers(1, K + 1))
            assignment.append(sorted(rng.choice(np.arange(1, K + 1), size=k, replace=False).tolist()))
        ub, total = _powerset_oracle(assignment, K)
        got_total, ratio = compute_M_total(assignment)
        assert _to_sets(compute_M_UB(assignment)) == ub
        assert _to_sets(got_total) == total
        assert Fraction(len(ub), len(total)) == Fraction(ratio).limit_denominator(1000)


def test_disjoint_singletons_give_five_of_thirty_one():
    total, ratio = compute_M_total([[1], [2], [3], [4], [5]])
    assert len(total) == 31 and len(compute_M_UB([[1], [2], [3], [4], [5]])) == 5
    assert ratio == 5 / 31


def test_full_assignment_covers_everything():
    total, ratio = compute_M_total(["123", "123"])
    assert ratio == 1.0 and len(total) == 7


@pytest.mark.parametrize("text,mask", [("124", 0b1011), ("m_13", 0b101), ([2], 0b10), (5, 5), ("1,3", 0b101)])
def test_parse_combination(text, mask):
    assert parse_combination(text) == mask
    assert parse_combination(combination_name(mask)) == mask


def test_parse_combination_rejects():
    for bad in ("", "m_", 0, [0], "0"):
        with pytest.raises(ContractError):
            parse_combination(bad)
    with pytest.raises(ContractError):
        parse_combination("14", K=3)


def test_lattice_order_and_names():
    lat = CombinationLattice(3)
    assert len(lat) == 7 and lat.masks() == list(range(1, 8))
    assert lat.names() == ["m_1", "m_2", "m_12", "m_3", "m_13", "m_23", "m_123"]


def test_confusion_matches_pixel_loop():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p, t = rng.random((7, 9)) < 0.4, rng.random((7, 9)) < 0.3
        region = rng.random((7, 9)) < 0.8
        tp = fp = fn = tn = 0
        for i in range(7):
            for j in range(9):
                if not region[i, j]:
                    continue
                tp += p[i, j] and t[i, j]
                fp += p[i, j] and not t[i, j]
                fn += (not p[i, j]) and t[i, j]
                tn += (not p[i, j]) and not t[i, j]
        c = confusion(p, t, region)
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        assert f1(c) == pytest.approx(2 * tp / (2 * tp + fp + fn))
    with pytest.raises(DimensionError):
        confusion(np.zeros(3), np.zeros(4))


def test_f1_edge_cases():
    assert f1(ConfusionCounts(0, 0, 0, 10)) == 1.0
    assert f1(ConfusionCounts(0, 5, 0, 5)) == 0.0
    assert f1(ConfusionCounts(3, 1, 1, 0)) == 0.75


def _table(model, f1s, fold=0):
    t = MetricTable()
    for mask, v in enumerate(f1s, start=1):
        tp = int(round(v * 100))
        # 2tp / (2tp + fp) with fp chosen to hit v
        t.record(model, 1, fold, mask, ConfusionCounts(tp, 200 - 2 * tp, 0, 50))
    return t


def test_metric_csv_round_trip(tmp_path):
    t = _table("MS", [0.5, 0.25, 0.75])
    t.extend(_table("MZ", [0.4, 0.2, 0.1]))
    t.to_csv(tmp_path / "m.csv")
    back = MetricTable.from_csv(tmp_path / "m.csv")
    assert [(r.key, r.counts, r.f1) for r in back] == [(r.key, r.counts, r.f1) for r in t]
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "model,class,fold,combination,tp,fp,fn,tn,f1"
    with pytest.raises(ContractError):
        t.record("MS", 1, 0, 1, ConfusionCounts())
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ContractError):
        MetricTable.from_csv(tmp_path / "bad.csv")


def test_relative_scores_pairs_and_unmatched():
    a = _table("A", [0.5, 0.6, 0.7])
    b = _table("B", [0.4, 0.6])
    rel = relative_scores(a, b)
    np.testing.assert_allclose(rel.diffs, [0.1, 0.0], atol=1e-12)
    assert rel.unmatched_candidate == [(1, 0, 3)] and rel.unmatched_reference == []
    with pytest.raises(ContractError):
        relative_scores(a, _table("C", [0.1], fold=3))


def test_quantify_fraction():
    pred = np.array([[1, 1, 0], [0, 1, 0]])
    tissue = np.array([[1, 1, 1], [0, 0, 1]])
    assert quantify_fraction(pred, tissue) == 2 / 4
    with pytest.raises(ContractError):
        quantify_fraction(pred, np.zeros_like(tissue))


def test_recalibration_distances():
    model = build_model(ModelConfig.preset("MS-ME", K=3, depth=1, base_filters=4, seed=3))
    rows = analyze_recalibration(model)
    assert [r[0] for r in rows] == ["enc0", "bottleneck", "dec0"]
    for name, mean, std, n in rows:
        assert n == 21 and 0 <= mean <= 2 and std >= 0
    with pytest.raises(ContractError):
        analyze_recalibration(build_model(ModelConfig("MS", depth=1)))


def test_recalibration_zero_when_excitation_constant():
    model = build_model(ModelConfig.preset("MS-ME", K=3, depth=1, base_filters=4))
    for p in model.registry:
        if ".me.w" in p.name:
            p.tensor.data[...] = 0
    for _, mean, std, _ in analyze_recalibration(model):
        assert mean == 0 and std == 0


def _labelled_sample(rng, K=2, H=30, markers=None):
    ch = rng.standard_normal((K, 1, H, H)).astype(np.float32)
    lab = (rng.random((2, 1, H, H)) < 0.2).astype(np.uint8)
    return SampleRecord("t", ch, markers or tuple(range(1, K + 1)), 1.0, lab, np.ones((1, H, H), np.uint8))


def test_prediction_matches_single_patch_forward():
    # when one patch covers the slice, tiling must not change the result
    rng = np.random.default_rng(2)
    model = build_model(ModelConfig("MS", K=2, depth=1, base_filters=2))
    geo = geometry_for(model.cfg, (38, 38))
    s = _labelled_sample(rng, H=geo.output_size[0])
    prob = predict_sample(model, s, 0b01, geo)
    x = np.pad(s.channels[:, 0], ((0, 0), (geo.margin,) * 2, (geo.margin,) * 2))
    x[1] = 0
    z = model.forward(x, MarkerAvailability.from_mask(1, 2)).data
    e = np.exp(z - z.max(0))
    np.testing.assert_allclose(prob[:, 0], e / e.sum(0), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(prob.sum(0), 1, atol=1e-5)


def test_evaluate_model_rows_and_infeasible_combination():
    rng = np.random.default_rng(3)
    model = build_model(ModelConfig("MS", K=2, depth=1, base_filters=2))
    s = _labelled_sample(rng, markers=(1,))
    s.channels[1] = 0
    t = evaluate_model(model, [s], 1, 0, [0b01], "MS")
    (row,) = t.rows
    assert row.counts.total == 30 * 30 and row.combination == 1
    with pytest.raises(InfeasibilityError):
        evaluate_model(model, [s], 1, 0, [0b11], "MS")
