"""Key-frame gating: contextual quality control, calibrated Z-score gates and
the temporal window filter."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import GatingConfig
from .exceptions import CalibrationError, ConfigError, FormatError
from .maskgen import decode_landmarks, extract_blobs
from .uncertainty import Prediction, predict_frame, uncertainty_scalar

MODES = {
    "cqc": (False, False),
    "cqc+al": (True, False),
    "cqc+ep": (False, True),
    "cqc+al+ep": (True, True),
}
MODE_ORDER = ("cqc", "cqc+al", "cqc+ep", "cqc+al+ep")


def parse_mode(mode: str) -> tuple[bool, bool]:
    """Return (use_aleatoric, use_epistemic) for a mode name like ``"CQC+AL"``."""
    key = mode.strip().lower().replace(" ", "")
    if key == "cqc+ep+al":
        key = "cqc+al+ep"
    if key not in MODES:
        raise ConfigError(f"unknown gating mode {mode!r}; expected one of {', '.join(MODE_ORDER)}")
    return MODES[key]


def mode_label(mode: str) -> str:
    use_al, use_ep = parse_mode(mode)
    return "CQC" + ("+AL" if use_al else "") + ("+EP" if use_ep else "")


@dataclass
class CalibrationStats:
    mu_alea: float
    sigma_alea: float
    mu_epi: float
    sigma_epi: float
    xi: float = 1.0
    lam: int = 5
    delta: float = 2.0
    tau: int = 2
    bin_threshold: float = 0.5
    n_mc: int = 30
    temporal_mode: str = "run"
    n_calib: int = 0
    model_checksum: str = ""

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationStats":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{Path(path).name}: invalid JSON ({exc})") from exc
        names = set(cls.__dataclass_fields__)
        unknown = set(data) - names
        if unknown:
            raise FormatError(f"{Path(path).name}: unknown field {sorted(unknown)[0]!r}")
        for required in ("mu_alea", "sigma_alea", "mu_epi", "sigma_epi"):
            if required not in data:
                raise FormatError(f"{Path(path).name}: missing field {required!r}")
        return cls(**data)


@dataclass
class FrameDecision:
    frame_index: int
    cqc_pass: bool
    tau_hat: int
    z_alea: float
    z_epi: float
    alea_pass: bool
    epi_pass: bool
    accepted: bool = False
    length_px: Optional[float] = None
    points: Optional[list] = None

    @property
    def passed(self) -> bool:
        """All enabled criteria passed, before the temporal filter."""
        return self.cqc_pass and self.alea_pass and self.epi_pass


def _mean_std(values: Sequence[float], floor: float) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mu = float(arr.mean())
    sigma = float(np.sqrt(np.mean((arr - mu) ** 2)))
    return mu, max(sigma, floor)


def calibration_stats_from_sums(alea_sums: Sequence[float], epi_sums: Sequence[float],
                                gating: GatingConfig, delta: float,
                                model_checksum: str = "") -> CalibrationStats:
    if len(alea_sums) < 2 or len(epi_sums) != len(alea_sums):
        raise CalibrationError(f"calibration needs at least 2 key frames, got {len(alea_sums)}")
    mu_a, sd_a = _mean_std(alea_sums, gating.sigma_stat_floor)
    mu_e, sd_e = _mean_std(epi_sums, gating.sigma_stat_floor)
    return CalibrationStats(
        mu_alea=mu_a, sigma_alea=sd_a, mu_epi=mu_e, sigma_epi=sd_e,
        xi=gating.xi, lam=gating.lam, delta=float(delta), tau=gating.tau,
        bin_threshold=gating.bin_threshold, n_mc=gating.n_mc,
        temporal_mode=gating.temporal_mode, n_calib=len(alea_sums),
        model_checksum=model_checksum,
    )


def calibrate(model, calib_videos, gating: GatingConfig, delta: float, seed: int = 0) -> CalibrationStats:
    """Fit uncertainty statistics on the labelled key frame of each calibration video.

    Every calibration key frame contributes, whether or not it passes CQC.
    """
    from .bunet import weights_checksum

    if len(calib_videos) < 2:
        raise CalibrationError(f"calibration needs N' >= 2 videos, got {len(calib_videos)}")
    alea, epi = [], []
    for video in calib_videos:
        k = video.labeled_key_index
        pred = predict_frame(model, video.frame(k), gating.n_mc, seed, k)
        alea.append(uncertainty_scalar(pred.aleatoric))
        epi.append(uncertainty_scalar(pred.epistemic))
    return calibration_stats_from_sums(alea, epi, gating, delta, weights_checksum(model))


def z_score(sum_u: float, mu: float, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return abs(sum_u - mu) / sigma


def passes_gate(z: float, xi: float) -> bool:
    """A frame fails only when Z is strictly above the threshold."""
    return not z > xi


def gate_frame(prediction: Prediction, stats: CalibrationStats, mode: str = "cqc+al+ep") -> FrameDecision:
    use_al, use_ep = parse_mode(mode)
    blobs = extract_blobs(prediction.heatmap, stats.bin_threshold)
    tau_hat, points = decode_landmarks(blobs, stats.tau, stats.delta)
    cqc = tau_hat == stats.tau
    z_a = z_score(uncertainty_scalar(prediction.aleatoric), stats.mu_alea, stats.sigma_alea) if use_al else 0.0
    z_e = z_score(uncertainty_scalar(prediction.epistemic), stats.mu_epi, stats.sigma_epi) if use_ep else 0.0
    length_px = None
    if cqc and stats.tau == 2:
        (r0, c0), (r1, c1) = points
        length_px = float(np.hypot(r1 - r0, c1 - c0))
    return FrameDecision(
        frame_index=prediction.frame_index,
        cqc_pass=cqc,
        tau_hat=tau_hat,
        z_alea=z_a,
        z_epi=z_e,
        alea_pass=passes_gate(z_a, stats.xi) if use_al else True,
        epi_pass=passes_gate(z_e, stats.xi) if use_ep else True,
        length_px=length_px,
        points=points if cqc else None,
    )


def temporal_filter(passes: Sequence[bool], lam: int, mode: str = "run") -> list[bool]:
    """Keep frames that sit in a sufficiently long stretch of passing frames.

    ``mode="run"``: a passing frame is kept iff its maximal run of consecutive
    passing frames has length >= ``lam``. ``mode="centered"``: a passing frame
    is kept iff every frame of the ``lam``-wide window centred on it (clipped
    at the sequence ends) passes.
    """
    if lam < 1:
        raise ValueError("lam must be >= 1")
    flags = [bool(p) for p in passes]
    n = len(flags)
    out = [False] * n
    if mode == "run":
        i = 0
        while i < n:
            if not flags[i]:
                i += 1
                continue
            j = i
            while j < n and flags[j]:
                j += 1
            if j - i >= lam:
                out[i:j] = [True] * (j - i)
            i = j
    elif mode == "centered":
        before = (lam - 1) // 2
        after = lam - 1 - before
        for i in range(n):
            lo, hi = max(0, i - before), min(n, i + after + 1)
            out[i] = all(flags[lo:hi])
    else:
        raise ValueError(f"unknown temporal mode {mode!r}")
    return out


def gate_video(predictions: Sequence[Prediction], stats: CalibrationStats, mode: str) -> list[FrameDecision]:
    decisions = [gate_frame(p, stats, mode) for p in predictions]
    accepted = temporal_filter([d.passed for d in decisions], stats.lam, stats.temporal_mode)
    for d, a in zip(decisions, accepted):
        d.accepted = a
    return decisions
