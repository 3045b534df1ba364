"""Metric oracle tests: counting metrics vs per-pixel loops, AUC vs
pairwise brute force, Welch t-test vs a quadrature CDF oracle, and report
export/round-trip consistency."""

import csv
import json
import math

import numpy as np
import pytest
from scipy.integrate import quad

from octadapt.errors import ContractError
from octadapt.metrics import (BoxPlotStats, MetricRow, accuracy, aggregate,
                              auc, box_plot_stats, build_report, compute_row,
                              dice, export_report, jaccard, load_rows_csv,
                              welch_ttest)


def confusion_loop(pred, gt):
    """Plain per-pixel counting, independent of any vectorized formula."""
    tp = tn = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif not p and g:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def pairwise_auc(scores, gt):
    """Brute-force Mann-Whitney: wins + half ties over all pos/neg pairs."""
    s = scores.ravel()
    g = gt.ravel().astype(bool)
    pos, neg = s[g], s[~g]
    if pos.size == 0 or neg.size == 0:
        return None
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def t_cdf_quadrature(df: float, t: float) -> float:
    """Student-t CDF by numerical integration of the density, using only
    math.lgamma and scipy.integrate (no t-distribution routines)."""
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)

    def pdf(x):
        return c * (1 + x * x / df) ** (-(df + 1) / 2)

    if t >= 0:
        tail, _ = quad(pdf, t, np.inf)
        return 1.0 - tail
    tail, _ = quad(pdf, -np.inf, t)
    return tail


def test_accuracy_basics():
    a = np.array([[1, 0], [0, 0]], dtype=np.uint8)
    b = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    assert accuracy(a, a) == 1.0
    assert accuracy(a, 1 - a) == 0.0
    assert accuracy(a, b) == 3 / 4


def test_dice_jaccard_basics():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[0, :4] = 1
    assert dice(a, a) == 1.0 and jaccard(a, a) == 1.0
    b = np.zeros((4, 4), dtype=np.uint8)
    b[3, :4] = 1
    assert dice(a, b) == 0.0 and jaccard(a, b) == 0.0
    # |A|=4, |B|=4, |A n B|=2
    c = np.zeros((4, 4), dtype=np.uint8)
    c[0, 2:] = 1
    c[1, :2] = 1
    assert dice(a, c) == 0.5
    assert jaccard(a, c) == pytest.approx(1 / 3, abs=1e-15)


def test_both_empty_convention():
    z = np.zeros((4, 4), dtype=np.uint8)
    assert dice(z, z) == 1.0
    assert jaccard(z, z) == 1.0


def test_dim_mismatch_rejected():
    with pytest.raises(ContractError):
        dice(np.zeros((4, 4), dtype=np.uint8), np.zeros((4, 5), dtype=np.uint8))


def test_counting_metrics_match_loop_oracle():
    rng = np.random.default_rng(17)
    for _ in range(50):
        h, w = rng.integers(4, 24, size=2)
        pred = rng.integers(0, 2, (h, w)).astype(np.uint8)
        gt = rng.integers(0, 2, (h, w)).astype(np.uint8)
        tp, tn, fp, fn = confusion_loop(pred, gt)
        total = h * w
        assert accuracy(pred, gt) == (tp + tn) / total
        denom = 2 * tp + fp + fn
        want_dice = 1.0 if denom == 0 else 2 * tp / denom
        assert dice(pred, gt) == want_dice
        union = tp + fp + fn
        want_jac = 1.0 if union == 0 else tp / union
        assert jaccard(pred, gt) == want_jac


def test_dice_jaccard_identity_and_symmetry():
    rng = np.random.default_rng(29)
    for _ in range(200):
        pred = rng.integers(0, 2, (8, 8)).astype(np.uint8)
        gt = rng.integers(0, 2, (8, 8)).astype(np.uint8)
        d, j = dice(pred, gt), jaccard(pred, gt)
        assert abs(d - 2 * j / (1 + j)) < 1e-12
        assert d == dice(gt, pred)
        assert j == jaccard(gt, pred)
        assert accuracy(pred, gt) == accuracy(1 - pred, 1 - gt)


def test_auc_trivial_cases():
    gt = np.array([[1, 1, 0, 0]], dtype=np.uint8)
    sep = np.array([[0.9, 0.8, 0.2, 0.1]])
    assert auc(sep, gt) == 1.0
    flat = np.full((1, 4), 0.5)
    assert auc(flat, gt) == 0.5


def test_auc_spec_fixtures():
    gt = np.array([[1, 0, 1]], dtype=np.uint8)
    assert auc(np.array([[0.9, 0.4, 0.6]]), gt) == 1.0
    assert auc(np.array([[0.2, 0.4, 0.6]]), gt) == 0.5


def test_auc_single_class_absent():
    assert auc(np.random.default_rng(0).random((4, 4)),
               np.zeros((4, 4), dtype=np.uint8)) is None
    assert auc(np.random.default_rng(0).random((4, 4)),
               np.ones((4, 4), dtype=np.uint8)) is None


def test_auc_matches_pairwise_brute_force():
    rng = np.random.default_rng(31)
    for _ in range(60):
        h, w = rng.integers(3, 32, size=2)
        gt = rng.integers(0, 2, (h, w)).astype(np.uint8)
        # quantized scores produce plenty of ties
        scores = np.round(rng.random((h, w)), 1)
        want = pairwise_auc(scores, gt)
        got = auc(scores, gt)
        if want is None:
            assert got is None
        else:
            assert got == want


def test_welch_identical_groups():
    a = np.array([0.3, 0.5, 0.7, 0.4])
    res = welch_ttest(a, a)
    assert res.t == 0.0
    assert abs(res.p - 1.0) < 1e-9


def test_welch_complete_separation():
    res = welch_ttest(np.zeros(10), np.ones(10))
    assert res.p < 1e-6


def test_welch_symmetry_and_preconditions():
    rng = np.random.default_rng(5)
    a, b = rng.normal(0, 1, 12), rng.normal(0.5, 2, 9)
    r1, r2 = welch_ttest(a, b), welch_ttest(b, a)
    assert r1.t == -r2.t
    assert r1.p == r2.p
    with pytest.raises(ContractError):
        welch_ttest([1.0], [1.0, 2.0])


def test_welch_matches_quadrature_oracle():
    rng = np.random.default_rng(41)
    for _ in range(50):
        n1, n2 = rng.integers(3, 30, size=2)
        a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 3), n1)
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 3), n2)
        res = welch_ttest(a, b)
        want = 2.0 * t_cdf_quadrature(res.df, -abs(res.t))
        assert abs(res.p - want) < 1e-6


def test_welch_df_and_p_against_reference_stats():
    from scipy import stats
    rng = np.random.default_rng(43)
    for _ in range(20):
        a = rng.normal(0, 1, 15)
        b = rng.normal(0.3, 2, 10)
        res = welch_ttest(a, b)
        ref = stats.ttest_ind(a, b, equal_var=False)
        assert res.t == pytest.approx(ref.statistic, abs=1e-10)
        assert res.p == pytest.approx(ref.pvalue, abs=1e-10)


def _rows():
    rng = np.random.default_rng(7)
    rows = []
    for method, base in (("unprocessed", 0.5), ("traditional", 0.7),
                         ("cyclegan", 0.9)):
        for v in range(2):
            for i in range(5):
                d = float(np.clip(base + rng.normal(0, 0.02), 0, 1))
                rows.append(MetricRow(method=method, volume_id=f"v{v}",
                                      bscan_index=i, accuracy=d, dice=d,
                                      jaccard=d / (2 - d),
                                      auc=None if i == 0 else d))
    return rows


def test_aggregate_mean_std_and_auc_exclusion():
    rows = _rows()
    agg = aggregate(rows)
    vals = [r.dice for r in rows if r.method == "cyclegan"]
    assert agg["cyclegan"]["dice"]["mean"] == pytest.approx(np.mean(vals))
    assert agg["cyclegan"]["dice"]["std"] == pytest.approx(np.std(vals, ddof=1))
    assert agg["cyclegan"]["dice"]["n"] == 10
    assert agg["cyclegan"]["auc"]["n"] == 8  # absent AUC rows excluded


def test_aggregate_missing_group_fails():
    with pytest.raises(ContractError):
        aggregate(_rows(), methods=["unprocessed", "missing-method"])


def test_box_plot_quartiles_linear_interpolation():
    st = box_plot_stats(np.arange(1, 9, dtype=float))
    assert st.q1 == 2.75
    assert st.median == 4.5
    assert st.q3 == 6.25
    assert st.whisker_low == 1.0 and st.whisker_high == 8.0
    assert st.outliers == []


def test_box_plot_whiskers_and_outliers():
    st = box_plot_stats([1.0, 2.0, 3.0, 4.0, 100.0])
    # q3 + 1.5 IQR fence excludes 100; whisker sits on the extreme inlier
    assert st.whisker_high == 4.0
    assert st.outliers == [100.0]
    with pytest.raises(ContractError):
        box_plot_stats([])


def test_report_significance_flags():
    report = build_report(_rows())
    key = "traditional|cyclegan"
    assert report.p_values["dice"][key] < 0.05
    assert report.significance["dice"][key] is True
    assert report.metadata["ttest"] == "welch_two_tailed"


def test_export_round_trip_exact(tmp_path):
    rows = _rows()
    report = build_report(rows)
    written = export_report(report, tmp_path)
    back = load_rows_csv(written["rows"])
    assert len(back) == len(rows)
    for a, b in zip(rows, back):
        assert a == b
    # aggregates recomputable exactly from exported rows
    assert aggregate(back) == report.aggregates
    payload = json.loads(written["report"].read_text())
    assert payload["aggregates"] == report.aggregates
    assert set(payload["significance"]) == {"accuracy", "dice", "jaccard", "auc"}


def test_export_table_matches_aggregates(tmp_path):
    report = build_report(_rows())
    written = export_report(report, tmp_path)
    lines = written["table"].read_text().splitlines()
    row = next(l for l in lines if l.startswith("cyclegan"))
    want = report.aggregates["cyclegan"]["accuracy"]
    assert f"{want['mean']:.4f} ({want['std']:.4f})" in row
    assert any("*" in l and "dice" in l for l in lines)


def test_export_boxplot_files(tmp_path):
    report = build_report(_rows())
    written = export_report(report, tmp_path)
    with open(written["boxplot_dice"], newline="") as f:
        recs = list(csv.DictReader(f))
    kinds = {r["kind"] for r in recs}
    assert {"q1", "median", "q3", "whisker_low", "whisker_high",
            "value"} <= kinds
    med = next(float(r["value"]) for r in recs
               if r["method"] == "cyclegan" and r["kind"] == "median")
    vals = [r.dice for r in report.rows if r.method == "cyclegan"]
    assert med == float(np.percentile(vals, 50))


def test_compute_row_fields():
    pred = np.zeros((8, 8), dtype=np.uint8)
    pred[2:5] = 1
    gt = np.zeros((8, 8), dtype=np.uint8)
    gt[3:6] = 1
    probs = np.random.default_rng(0).random((8, 8))
    row = compute_row("m", "vol", 3, pred, probs, gt)
    assert row.method == "m" and row.bscan_index == 3
    assert row.dice == dice(pred, gt)
    assert row.auc == auc(probs, gt)
    assert 0.0 <= row.accuracy <= 1.0
