"""Segmentation evaluation: per-B-scan accuracy, Dice, Jaccard, and AUC
against ground truth, mean(std) aggregation per method, Welch two-tailed
t-tests between methods, and plot-ready report export.

Conventions: Dice/Jaccard of two empty masks is 1.0 (perfect agreement on
absence); AUC is undefined when the ground truth contains a single class
and is recorded as absent rather than imputed; ties in AUC scoring count
0.5 via midranks.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.special import stdtr
from scipy.stats import rankdata

from .data import SegMask
from .errors import ContractError

METRIC_NAMES = ("accuracy", "dice", "jaccard", "auc")


def _as_binary(mask) -> np.ndarray:
    if isinstance(mask, SegMask):
        return mask.labels.astype(bool)
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ContractError("mask must be 2D")
    if arr.dtype != bool and arr.size and arr.max() > 1:
        raise ContractError("mask must be binary")
    return arr.astype(bool)


def _check_dims(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ContractError(f"mask dims differ: {a.shape} vs {b.shape}")


def accuracy(pred, gt) -> float:
    """(TP + TN) / total."""
    p, g = _as_binary(pred), _as_binary(gt)
    _check_dims(p, g)
    return float((p == g).sum()) / p.size


def dice(pred, gt) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    p, g = _as_binary(pred), _as_binary(gt)
    _check_dims(p, g)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def jaccard(pred, gt) -> float:
    """|A n B| / |A u B|; 1.0 when both masks are empty."""
    p, g = _as_binary(pred), _as_binary(gt)
    _check_dims(p, g)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def auc(prob_map, gt) -> float | None:
    """Area under the ROC curve via the normalized Mann-Whitney U statistic
    with midrank tie handling. Returns None when gt has a single class."""
    scores = np.asarray(prob_map, dtype=np.float64).ravel()
    g = _as_binary(gt).ravel()
    if scores.shape != g.shape:
        raise ContractError("probability map dims must match ground truth")
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[g].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class TTestResult:
    t: float
    df: float
    p: float


def welch_ttest(a, b) -> TTestResult:
    """Welch's unequal-variance two-tailed t-test.

    Degenerate cases: equal means give p = 1 even when both groups are
    constant; unequal means with zero pooled variance give p = 0.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    n1, n2 = x.size, y.size
    if n1 < 2 or n2 < 2:
        raise ContractError("t-test requires >= 2 samples per group")
    diff = x.mean() - y.mean()
    se1 = x.var(ddof=1) / n1
    se2 = y.var(ddof=1) / n2
    denom_sq = se1 + se2
    if diff == 0.0:
        return TTestResult(t=0.0, df=float(n1 + n2 - 2), p=1.0)
    if denom_sq == 0.0:
        return TTestResult(t=math.copysign(math.inf, diff),
                           df=float(n1 + n2 - 2), p=0.0)
    t = diff / math.sqrt(denom_sq)
    df = denom_sq ** 2 / (se1 ** 2 / (n1 - 1) + se2 ** 2 / (n2 - 1))
    p = 2.0 * float(stdtr(df, -abs(t)))
    return TTestResult(t=float(t), df=float(df), p=min(max(p, 0.0), 1.0))


@dataclass
class MetricRow:
    method: str
    volume_id: str
    bscan_index: int
    accuracy: float
    dice: float
    jaccard: float
    auc: float | None


def compute_row(method: str, volume_id: str, bscan_index: int,
                pred, prob_map, gt) -> MetricRow:
    return MetricRow(
        method=method, volume_id=volume_id, bscan_index=bscan_index,
        accuracy=accuracy(pred, gt), dice=dice(pred, gt),
        jaccard=jaccard(pred, gt),
        auc=auc(prob_map, gt) if prob_map is not None else None)


def _values(rows: list[MetricRow], method: str, metric: str) -> np.ndarray:
    vals = [getattr(r, metric) for r in rows
            if r.method == method and getattr(r, metric) is not None]
    return np.asarray(vals, dtype=np.float64)


def aggregate(rows: list[MetricRow], methods: list[str] | None = None) -> dict:
    """Per method x metric mean and sample std (n-1). Rows with absent AUC
    are excluded from the AUC aggregate only."""
    if methods is None:
        methods = list(dict.fromkeys(r.method for r in rows))
    out = {}
    for m in methods:
        if not any(r.method == m for r in rows):
            raise ContractError(f"no metric rows for method {m!r}")
        out[m] = {}
        for metric in METRIC_NAMES:
            v = _values(rows, m, metric)
            mean = float(v.mean()) if v.size else float("nan")
            std = float(v.std(ddof=1)) if v.size >= 2 else 0.0
            out[m][metric] = {"mean": mean, "std": std, "n": int(v.size)}
    return out


@dataclass
class BoxPlotStats:
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list[float]


def box_plot_stats(values) -> BoxPlotStats:
    """Tukey box: linearly interpolated quartiles, whiskers at the most
    extreme points within 1.5 IQR of the box."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ContractError("box plot requires at least one value")
    q1, med, q3 = (float(q) for q in np.percentile(v, [25, 50, 75]))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return BoxPlotStats(
        q1=q1, median=med, q3=q3,
        whisker_low=float(inside.min()), whisker_high=float(inside.max()),
        outliers=[float(x) for x in v[(v < lo_fence) | (v > hi_fence)]])


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    methods: list[str]
    aggregates: dict
    p_values: dict          # metric -> "m1|m2" -> p
    significance: dict      # metric -> "m1|m2" -> bool
    alpha: float = 0.05
    metadata: dict | None = None


def build_report(rows: list[MetricRow], methods: list[str] | None = None,
                 alpha: float = 0.05) -> MetricsReport:
    if methods is None:
        methods = list(dict.fromkeys(r.method for r in rows))
    aggs = aggregate(rows, methods)  # raises on an empty method group
    p_values: dict = {m: {} for m in METRIC_NAMES}
    significance: dict = {m: {} for m in METRIC_NAMES}
    for metric in METRIC_NAMES:
        for m1, m2 in combinations(methods, 2):
            v1, v2 = _values(rows, m1, metric), _values(rows, m2, metric)
            if v1.size < 2 or v2.size < 2:
                continue
            res = welch_ttest(v1, v2)
            key = f"{m1}|{m2}"
            p_values[metric][key] = res.p
            significance[metric][key] = bool(res.p < alpha)
    meta = {
        "ttest": "welch_two_tailed",
        "alpha": alpha,
        "quantile_rule": "linear_interpolation",
        "whiskers": "1.5_iqr",
    }
    return MetricsReport(rows=rows, methods=methods, aggregates=aggs,
                         p_values=p_values, significance=significance,
                         alpha=alpha, metadata=meta)


def export_report(report: MetricsReport, outdir) -> dict[str, Path]:
    """Write rows.csv, report.json, table.txt, and per-metric box-plot CSVs.

    report.json carries full-precision values; table.txt is the rounded
    human-readable mean (std) view with significance flags.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = {}

    rows_path = outdir / "rows.csv"
    with open(rows_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "volume_id", "bscan_index"] + list(METRIC_NAMES))
        for r in report.rows:
            w.writerow([r.method, r.volume_id, r.bscan_index,
                        repr(r.accuracy), repr(r.dice), repr(r.jaccard),
                        "" if r.auc is None else repr(r.auc)])
    written["rows"] = rows_path

    json_path = outdir / "report.json"
    payload = {
        "methods": report.methods,
        "aggregates": report.aggregates,
        "p_values": report.p_values,
        "significance": report.significance,
        "alpha": report.alpha,
        "metadata": report.metadata,
    }
    json_path.write_text(json.dumps(payload, indent=2))
    written["report"] = json_path

    table_path = outdir / "table.txt"
    with open(table_path, "w") as f:
        f.write(f"{'method':<14}" + "".join(f"{m:>20}" for m in METRIC_NAMES) + "\n")
        for m in report.methods:
            cells = []
            for metric in METRIC_NAMES:
                a = report.aggregates[m][metric]
                cells.append(f"{a['mean']:.4f} ({a['std']:.4f})")
            f.write(f"{m:<14}" + "".join(f"{c:>20}" for c in cells) + "\n")
        f.write("\nsignificance (two-tailed Welch t-test, "
                f"alpha={report.alpha}):\n")
        for metric in METRIC_NAMES:
            for key, p in report.p_values[metric].items():
                flag = "*" if report.significance[metric][key] else " "
                m1, m2 = key.split("|")
                f.write(f"  {flag} {metric:<9} {m1} vs {m2}: p={p:.3e}\n")
    written["table"] = table_path

    for metric in METRIC_NAMES:
        bp_path = outdir / f"boxplot_{metric}.csv"
        with open(bp_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "kind", "value"])
            for m in report.methods:
                v = _values(report.rows, m, metric)
                if v.size == 0:
                    continue
                st = box_plot_stats(v)
                for kind, val in [("q1", st.q1), ("median", st.median),
                                  ("q3", st.q3),
                                  ("whisker_low", st.whisker_low),
                                  ("whisker_high", st.whisker_high)]:
                    w.writerow([m, kind, repr(val)])
                for o in st.outliers:
                    w.writerow([m, "outlier", repr(o)])
                for val in v:
                    w.writerow([m, "value", repr(float(val))])
        written[f"boxplot_{metric}"] = bp_path
    return written


def load_rows_csv(path) -> list[MetricRow]:
    """Inverse of the rows.csv export; used for report self-consistency."""
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append(MetricRow(
                method=rec["method"], volume_id=rec["volume_id"],
                bscan_index=int(rec["bscan_index"]),
                accuracy=float(rec["accuracy"]), dice=float(rec["dice"]),
                jaccard=float(rec["jaccard"]),
                auc=float(rec["auc"]) if rec["auc"] else None))
    return rows
