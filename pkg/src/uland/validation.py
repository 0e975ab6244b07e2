"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np


def check_frame(frame, input_size: int | None = None) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D frame, got shape {arr.shape}")
    if arr.shape[0] < 16 or arr.shape[1] < 16:
        raise ValueError(f"frames must be at least 16x16, got {arr.shape}")
    if input_size is not None and arr.shape != (input_size, input_size):
        raise ValueError(f"expected a {input_size}x{input_size} frame, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("frame contains non-finite values")
    return arr


def check_heatmap(heatmap) -> np.ndarray:
    arr = np.asarray(heatmap, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D heatmap, got shape {arr.shape}")
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise ValueError("heatmap values must lie in [0, 1]")
    return arr


def check_video(video, input_size: int | None = None, labelled: bool = False):
    """Validate a video-like object (``frames``, ``n_frames``, ``frame(i)``)."""
    for attr in ("frames", "frame", "n_frames", "pixel_spacing"):
        if not hasattr(video, attr):
            raise TypeError(f"{type(video).__name__} is not a video: missing {attr!r}")
    if video.n_frames < 1:
        raise ValueError(f"video {getattr(video, 'video_id', '?')} has no frames")
    check_frame(video.frame(0), input_size)
    if labelled:
        k = video.labeled_key_index
        if not 0 <= k < video.n_frames:
            raise ValueError(f"labelled key index {k} outside [0, {video.n_frames})")
        if len(video.label.points) < 1:
            raise ValueError("label has no points")
    return video


def check_videos(videos, input_size: int | None = None, labelled: bool = False) -> list:
    videos = list(videos)
    if not videos:
        raise ValueError("expected at least one video")
    return [check_video(v, input_size, labelled) for v in videos]
