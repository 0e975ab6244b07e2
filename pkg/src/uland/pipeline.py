"""Per-video measurement: gated U-LanD and the two ungated baselines."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bunet import BUNet, weights_checksum
from .exceptions import ChecksumMismatchError
from .gating import CalibrationStats, FrameDecision, gate_video, mode_label
from .maskgen import extract_blobs, two_largest_cogs
from .uncertainty import Prediction, aleatoric_predict, predict_frames

ALL_FRAMES = "ALL_FRAMES"
SEMI_AUTO = "SEMI_AUTO"


@dataclass
class VideoMeasurement:
    video_id: str
    method: str
    pooled_lengths: list[float] = field(default_factory=list)
    reported_length: Optional[float] = None
    accepted_indices: list[int] = field(default_factory=list)
    mode: str = ""
    gt_mm: Optional[float] = None

    @property
    def rejected(self) -> bool:
        return self.reported_length is None


def uland_method(mode: str) -> str:
    return f"ULAND({mode_label(mode)})"


def measure_length(points, pixel_spacing: float) -> float:
    pts = list(points)
    if len(pts) != 2:
        raise ValueError(f"length needs exactly 2 points, got {len(pts)}")
    (r0, c0), (r1, c1) = pts
    return float(math.hypot(r1 - r0, c1 - c0) * pixel_spacing)


def percentile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation percentile of a non-empty list."""
    v = sorted(float(x) for x in values)
    if not v:
        raise ValueError("percentile of an empty list")
    rank = q / 100.0 * (len(v) - 1)
    lo, hi = math.floor(rank), math.ceil(rank)
    return v[lo] + (rank - lo) * (v[hi] - v[lo])


def percentile_75(values: Sequence[float]) -> float:
    return percentile(values, 75.0)


def _aggregate(video_id, method, lengths, indices, q=75.0, mode="") -> VideoMeasurement:
    reported = percentile(lengths, q) if lengths else None
    return VideoMeasurement(video_id=video_id, method=method, pooled_lengths=list(lengths),
                            reported_length=reported, accepted_indices=list(indices), mode=mode)


def check_checksum(model: BUNet, stats: CalibrationStats) -> None:
    if stats.model_checksum and stats.model_checksum != weights_checksum(model):
        raise ChecksumMismatchError("calibration stats were computed for different model weights")


def measure_from_predictions(video_id: str, pixel_spacing: float, predictions: Sequence[Prediction],
                             stats: CalibrationStats, mode: str, q: float = 75.0):
    """Gate, filter and pool. Returns (measurement, per-frame decisions)."""
    decisions = gate_video(predictions, stats, mode)
    lengths, indices = [], []
    for d in decisions:
        if d.accepted and d.length_px is not None:
            lengths.append(d.length_px * pixel_spacing)
            indices.append(d.frame_index)
    return _aggregate(video_id, uland_method(mode), lengths, indices, q, mode_label(mode)), decisions


def predict_video(model: BUNet, stats: CalibrationStats, video, mode: str = "cqc+al+ep",
                  seed: int = 0, q: float = 75.0, predictions: Optional[Sequence[Prediction]] = None
                  ) -> VideoMeasurement:
    """Fully automatic measurement; reads only the video's pixels, id and spacing."""
    check_checksum(model, stats)
    if predictions is None:
        predictions = predict_frames(model, video, stats.n_mc, seed)
    measurement, _ = measure_from_predictions(video.video_id, video.pixel_spacing, predictions,
                                              stats, mode, q)
    return measurement


def _length_from_heatmap(heatmap: np.ndarray, pixel_spacing: float, bin_threshold: float):
    cogs = two_largest_cogs(extract_blobs(heatmap, bin_threshold))
    return None if cogs is None else measure_length(cogs, pixel_spacing)


def baseline_all_frames(model: BUNet, video, bin_threshold: float = 0.5, q: float = 75.0,
                        predictions: Optional[Sequence[Prediction]] = None) -> VideoMeasurement:
    """Every frame with >= 2 blobs contributes; no radius filter, no gating."""
    lengths, indices = [], []
    for i in range(video.n_frames):
        if predictions is not None and predictions[i].heatmap_det is not None:
            heatmap = predictions[i].heatmap_det
        else:
            heatmap, _ = aleatoric_predict(model, video.frame(i))
        length = _length_from_heatmap(heatmap, video.pixel_spacing, bin_threshold)
        if length is not None:
            lengths.append(length)
            indices.append(i)
    return _aggregate(video.video_id, ALL_FRAMES, lengths, indices, q)


def baseline_semi_automatic(model: BUNet, video, bin_threshold: float = 0.5, q: float = 75.0,
                            all_keys: bool = False) -> VideoMeasurement:
    """Deterministic detection on the expert-chosen key frame(s) only."""
    frames = sorted(video.key_set) if all_keys else [video.labeled_key_index]
    lengths, indices = [], []
    for i in frames:
        heatmap, _ = aleatoric_predict(model, video.frame(i))
        length = _length_from_heatmap(heatmap, video.pixel_spacing, bin_threshold)
        if length is not None:
            lengths.append(length)
            indices.append(i)
    return _aggregate(video.video_id, SEMI_AUTO, lengths, indices, q)


CSV_FIELDS = ["video_id", "method", "mode", "reported_mm", "gt_mm", "rejected", "n_pooled",
              "accepted_indices"]


def measurement_row(m: VideoMeasurement) -> list[str]:
    return [
        m.video_id,
        m.method,
        m.mode,
        "" if m.reported_length is None else repr(m.reported_length),
        "" if m.gt_mm is None else repr(m.gt_mm),
        str(int(m.rejected)),
        str(len(m.pooled_lengths)),
        ";".join(str(i) for i in m.accepted_indices),
    ]


def append_measurements(measurements: Sequence[VideoMeasurement], path: str | Path) -> None:
    """Append rows to a per-video CSV, writing the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(CSV_FIELDS)
        for m in measurements:
            writer.writerow(measurement_row(m))


def read_measurements(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
