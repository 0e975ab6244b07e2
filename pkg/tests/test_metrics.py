import csv
import math

import numpy as np
import pytest

from uland.exceptions import UndefinedMetricError
from uland.metrics import (EvalReport, delta_r2, error_stats, evaluate, key_frame_separation_auc, r2_score,
                           read_report, reject_rate, reports_from_measurements, rounded_delta_r2,
                           scatter_filename, write_report, write_scatter)
from uland.pipeline import ALL_FRAMES, SEMI_AUTO, VideoMeasurement


def pearson_oracle(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def auc_oracle(sums, key):
    """O(n^2) pairwise comparison of -sum between key and non-key frames."""
    pos = [-s for s, k in zip(sums, key) if k]
    neg = [-s for s, k in zip(sums, key) if not k]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------- R2


def test_r2_examples():
    gt = [1.0, 2.0, 4.0, 7.0]
    assert r2_score([2 * g + 1 for g in gt], gt) == pytest.approx(100.0)
    assert r2_score([-g for g in gt], gt) == pytest.approx(100.0)
    r = pearson_oracle([1, 2, 3, 5], [1, 2, 3, 4])
    assert r2_score([1, 2, 3, 5], [1, 2, 3, 4]) == pytest.approx(100 * r * r, rel=1e-12)


def test_r2_affine_invariance(rng):
    for _ in range(20):
        x, y = rng.normal(size=15), rng.normal(size=15)
        a, b = rng.uniform(0.1, 10), rng.normal()
        assert r2_score(a * x + b, y) == pytest.approx(r2_score(x, y), rel=1e-9)
        assert 0.0 <= r2_score(x, y) <= 100.0


@pytest.mark.parametrize("pred, gt", [([1, 1, 1], [1, 2, 3]), ([1, 2], [5, 5]), ([1.0], [2.0]), ([1, 2], [1, 2, 3])])
def test_r2_undefined(pred, gt):
    with pytest.raises(UndefinedMetricError):
        r2_score(pred, gt)


# ---------------------------------------------------------------- delta R2


@pytest.mark.parametrize("r2, expected", [(66, 175), (41, 71), (59, 146), (63, 162), (24, 0)])
def test_delta_r2_table_arithmetic(r2, expected):
    assert rounded_delta_r2(r2, 24) == expected


def test_delta_r2_raw_value():
    assert delta_r2(63, 24) == 162.5  # exact tie, rounded half to even
    assert delta_r2(36, 24) == 50.0


def test_delta_r2_zero_baseline():
    with pytest.raises(UndefinedMetricError):
        delta_r2(10, 0)


# ---------------------------------------------------------------- errors, reject rate


def test_error_stats_examples():
    assert error_stats([1, 2, 3], [1, 2, 3]) == (0.0, 0.0, 0.0)
    assert error_stats([1, 7], [0, 4]) == (2.0, 1.0, 3.0)
    assert error_stats([4.5], [2.0]) == (2.5, 0.0, 2.5)
    with pytest.raises(UndefinedMetricError):
        error_stats([], [])


def test_error_stats_properties(rng):
    for _ in range(50):
        p, g = rng.normal(size=8), rng.normal(size=8)
        mae, std, mx = error_stats(p, g)
        assert mae <= mx + 1e-15 and std >= 0


def _m(vid, reported, gt=None, method="X"):
    return VideoMeasurement(video_id=vid, method=method, pooled_lengths=[] if reported is None else [reported],
                            reported_length=reported, gt_mm=gt)


def test_reject_rate():
    assert reject_rate([_m("a", 1.0), _m("b", 2.0)]) == 0.0
    assert reject_rate([_m("a", None), _m("b", None)]) == 100.0
    assert reject_rate([_m("a", None), _m("b", 2.0), _m("c", 2.0), _m("d", 1.0)]) == 25.0


# ---------------------------------------------------------------- AUC


def test_auc_examples():
    assert key_frame_separation_auc([1, 2, 5, 6], [True, True, False, False]) == 1.0
    assert key_frame_separation_auc([3, 3, 3, 3], [True, False, True, False]) == 0.5
    with pytest.raises(UndefinedMetricError):
        key_frame_separation_auc([1, 2], [True, True])


def test_auc_matches_pairwise_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(2, 40))
        sums = list(np.round(rng.normal(size=n), 1))  # rounding creates ties
        key = list(rng.random(n) < 0.4)
        key[0], key[1] = True, False
        assert key_frame_separation_auc(sums, key) == pytest.approx(auc_oracle(sums, key), abs=1e-12)


def test_auc_invariant_under_monotone_transform(rng):
    sums = rng.random(30)
    key = rng.random(30) < 0.5
    key[:2] = [True, False]
    a = key_frame_separation_auc(sums, key)
    assert key_frame_separation_auc(np.exp(3 * sums) + 1, key) == pytest.approx(a)


# ---------------------------------------------------------------- reports


def _methods():
    gt = [10.0, 12.0, 14.0, 16.0, 18.0]
    noisy = [11.0, 11.0, 15.0, 15.0, 19.0]
    return {
        ALL_FRAMES: [_m(str(i), p, g, ALL_FRAMES) for i, (p, g) in enumerate(zip(noisy, gt))],
        SEMI_AUTO: [_m(str(i), g + 0.1, g, SEMI_AUTO) for i, g in enumerate(gt)],
        "ULAND(CQC)": [_m(str(i), None if i == 0 else g, g, "ULAND(CQC)") for i, g in enumerate(gt)],
    }


def test_evaluate_excludes_rejected():
    rep = evaluate("ULAND(CQC)", _methods()["ULAND(CQC)"], baseline_r2=50.0)
    assert rep.n_evaluated == 4 and rep.reject_rate_pct == 20.0
    assert rep.r2_pct == pytest.approx(100.0) and rep.delta_r2_pct == pytest.approx(100.0)
    assert rep.mae_mm == 0.0


def test_reports_baseline_has_no_delta():
    reports = reports_from_measurements(_methods())
    assert reports[0].method == ALL_FRAMES and reports[0].delta_r2_pct is None
    base = reports[0].r2_pct
    assert base == pytest.approx(100 * pearson_oracle([11, 11, 15, 15, 19], [10, 12, 14, 16, 18]) ** 2)
    for r in reports[1:]:
        assert r.delta_r2_pct == pytest.approx(100 * (r.r2_pct - base) / base)


def test_all_rejected_method_reports_nan():
    rep = evaluate("X", [_m("a", None, 1.0), _m("b", None, 2.0)], baseline_r2=40.0)
    assert math.isnan(rep.r2_pct) and rep.delta_r2_pct is None and rep.reject_rate_pct == 100.0


def test_report_csv(tmp_path):
    reports = reports_from_measurements(_methods())
    path = tmp_path / "report.csv"
    write_report(reports, path)
    rows = read_report(path)
    assert [r["method"] for r in rows] == [ALL_FRAMES, SEMI_AUTO, "ULAND(CQC)"]
    assert rows[0]["delta_r2_pct"] == "n/a"
    assert rows[1]["delta_r2_pct"] == f"{round(reports[1].delta_r2_pct):+d}"
    assert float(rows[1]["delta_r2_raw"]) == pytest.approx(reports[1].delta_r2_pct, abs=1e-6)


def test_report_rounds_table_values(tmp_path):
    rep = EvalReport("ULAND(CQC+AL+EP)", 66.0, delta_r2(66.0, 24.0), 1, 1, 1, 0, 3)
    write_report([rep], tmp_path / "r.csv")
    assert read_report(tmp_path / "r.csv")[0]["delta_r2_pct"] == "+175"


def test_scatter_csv(tmp_path):
    ms = _methods()["ULAND(CQC)"]
    path = write_scatter("ULAND(CQC)", ms, tmp_path)
    assert path.name == scatter_filename("ULAND(CQC)") == "scatter_uland_cqc.csv"
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["video_id", "pred_mm", "gt_mm"] and len(rows) == 5
