"""Evaluation metrics and the method/ablation comparison harness."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .exceptions import UndefinedMetricError
from .gating import MODE_ORDER, CalibrationStats
from .pipeline import (ALL_FRAMES, SEMI_AUTO, VideoMeasurement, baseline_all_frames,
                       baseline_semi_automatic, check_checksum, measure_from_predictions,
                       uland_method)
from .uncertainty import Prediction, predict_frames, uncertainty_scalar


def r2_score(pred: Sequence[float], gt: Sequence[float]) -> float:
    """Squared Pearson correlation, in percent."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise UndefinedMetricError("r2 needs two equal-length lists with at least 2 values")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetricError("correlation is undefined for a constant list")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return 100.0 * min(r * r, 1.0)


def delta_r2(r2: float, r2_baseline: float) -> float:
    """Relative R2 improvement over the baseline, in percent (unrounded)."""
    if r2_baseline == 0:
        raise UndefinedMetricError("baseline R2 is zero")
    return 100.0 * (r2 - r2_baseline) / r2_baseline


def rounded_delta_r2(r2: float, r2_baseline: float) -> int:
    """:func:`delta_r2` rounded half-to-even, as printed in result tables."""
    return int(round(delta_r2(r2, r2_baseline)))


def error_stats(pred: Sequence[float], gt: Sequence[float]) -> tuple[float, float, float]:
    """(MAE, population STD, MAX) of the absolute errors."""
    err = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
    if err.size == 0:
        raise UndefinedMetricError("no evaluated pairs")
    return float(err.mean()), float(err.std()), float(err.max())


def reject_rate(measurements: Sequence[VideoMeasurement]) -> float:
    if not measurements:
        raise UndefinedMetricError("no measurements")
    return 100.0 * sum(m.rejected for m in measurements) / len(measurements)


def key_frame_separation_auc(per_frame_sums: Sequence[float], is_key: Sequence[bool]) -> float:
    """AUC of ``-sum`` as a key-frame score; ties count one half."""
    sums = np.asarray(per_frame_sums, dtype=np.float64)
    key = np.asarray(is_key, dtype=bool)
    n_pos, n_neg = int(key.sum()), int((~key).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both key and non-key frames")
    ranks = rankdata(-sums)  # average ranks handle ties
    u = ranks[key].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    method: str
    r2_pct: float
    delta_r2_pct: Optional[float]
    mae_mm: float
    std_mm: float
    max_mm: float
    reject_rate_pct: float
    n_evaluated: int


def evaluate(method: str, measurements: Sequence[VideoMeasurement],
             baseline_r2: Optional[float] = None) -> EvalReport:
    kept = [m for m in measurements if not m.rejected]
    pred = [m.reported_length for m in kept]
    gt = [m.gt_mm for m in kept]
    try:
        r2 = r2_score(pred, gt)
    except UndefinedMetricError:
        r2 = float("nan")
    if kept:
        mae, std, mx = error_stats(pred, gt)
    else:
        mae = std = mx = float("nan")
    dr2 = None
    if baseline_r2 is not None and baseline_r2 > 0 and not math.isnan(r2):
        dr2 = delta_r2(r2, baseline_r2)
    return EvalReport(method=method, r2_pct=r2, delta_r2_pct=dr2, mae_mm=mae, std_mm=std,
                      max_mm=mx, reject_rate_pct=reject_rate(measurements), n_evaluated=len(kept))


@dataclass
class VideoAnalysis:
    video: object
    predictions: list[Prediction]


def analyze_videos(model, stats: CalibrationStats, videos, seed: int = 0) -> list[VideoAnalysis]:
    """Run all per-frame inference once so every method reuses it."""
    check_checksum(model, stats)
    return [VideoAnalysis(v, predict_frames(model, v, stats.n_mc, seed)) for v in videos]


def measure_all_methods(model, stats: CalibrationStats, analyses: Sequence[VideoAnalysis],
                        modes: Sequence[str] = MODE_ORDER, semi_auto_all_keys: bool = False,
                        q: float = 75.0) -> dict[str, list[VideoMeasurement]]:
    methods: dict[str, list[VideoMeasurement]] = {ALL_FRAMES: [], SEMI_AUTO: []}
    for mode in modes:
        methods[uland_method(mode)] = []
    for a in analyses:
        v = a.video
        gt = float(v.label.length_gt)
        found = [baseline_all_frames(model, v, stats.bin_threshold, q, predictions=a.predictions),
                 baseline_semi_automatic(model, v, stats.bin_threshold, q, all_keys=semi_auto_all_keys)]
        for mode in modes:
            found.append(measure_from_predictions(v.video_id, v.pixel_spacing, a.predictions,
                                                  stats, mode, q)[0])
        for m in found:
            m.gt_mm = gt
            methods[m.method].append(m)
    return methods


def reports_from_measurements(methods: dict[str, list[VideoMeasurement]]) -> list[EvalReport]:
    base = evaluate(ALL_FRAMES, methods[ALL_FRAMES])
    reports = [base]
    baseline_r2 = None if math.isnan(base.r2_pct) else base.r2_pct
    for name, ms in methods.items():
        if name != ALL_FRAMES:
            reports.append(evaluate(name, ms, baseline_r2))
    return reports


def run_ablation(model, stats: CalibrationStats, test_videos, seed: int = 0,
                 semi_auto_all_keys: bool = False, modes: Sequence[str] = MODE_ORDER) -> list[EvalReport]:
    """ALL_FRAMES, SEMI_AUTO and each U-LanD mode on the same videos."""
    analyses = analyze_videos(model, stats, test_videos, seed)
    methods = measure_all_methods(model, stats, analyses, modes, semi_auto_all_keys)
    return reports_from_measurements(methods)


def frame_uncertainty_table(analyses: Sequence[VideoAnalysis]):
    """Per-frame (alea_sum, epi_sum, is_key) over all analysed videos."""
    alea, epi, key = [], [], []
    for a in analyses:
        for p in a.predictions:
            alea.append(uncertainty_scalar(p.aleatoric))
            epi.append(uncertainty_scalar(p.epistemic))
            key.append(p.frame_index in a.video.key_set)
    return np.array(alea), np.array(epi), np.array(key, dtype=bool)


REPORT_FIELDS = ["method", "r2_pct", "delta_r2_pct", "delta_r2_raw", "mae_mm", "std_mm", "max_mm",
                 "reject_rate_pct", "n_evaluated"]


def _fmt(x: Optional[float]) -> str:
    if x is None:
        return "n/a"
    return f"{x:.6f}"


def write_report(reports: Sequence[EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for r in reports:
            rounded = "n/a" if r.delta_r2_pct is None else f"{int(round(r.delta_r2_pct)):+d}"
            writer.writerow([r.method, _fmt(r.r2_pct), rounded, _fmt(r.delta_r2_pct), _fmt(r.mae_mm),
                             _fmt(r.std_mm), _fmt(r.max_mm), _fmt(r.reject_rate_pct), r.n_evaluated])


def scatter_filename(method: str) -> str:
    safe = method.lower().replace("(", "_").replace(")", "").replace("+", "_")
    return f"scatter_{safe}.csv"


def write_scatter(method: str, measurements: Sequence[VideoMeasurement], directory: str | Path) -> Path:
    path = Path(directory) / scatter_filename(method)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "pred_mm", "gt_mm"])
        for m in measurements:
            if not m.rejected:
                writer.writerow([m.video_id, repr(m.reported_length), repr(m.gt_mm)])
    return path


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
