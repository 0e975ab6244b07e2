"""scikit-learn style wrapper around the train -> calibrate -> gate pipeline."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bunet import build_model, train
from .config import ArchConfig, GatingConfig, RunConfig, TrainConfig, resolve_delta
from .gating import calibrate, parse_mode
from .metrics import r2_score
from .pipeline import predict_video
from .validation import check_videos


class ULandDetector(BaseEstimator):
    """Joint key-frame recognition and landmark measurement.

    ``fit`` trains on the labelled key frame of each video and calibrates the
    uncertainty gates on a held-out slice (or on ``calib`` when given).
    ``predict`` returns one length per video in mm, NaN for rejected videos.

    Parameters mirror :class:`RunConfig`; see that module for defaults.
    """

    def __init__(self, input_size=64, base_filters=32, levels=3, p_drop=0.2, epochs=100,
                 batch_size=16, lr=1e-3, n_mc_train=100, n_mc_test=30, delta=None, tau=2,
                 xi=1.0, lam=5, bin_threshold=0.5, percentile=75.0, mode="cqc+al+ep",
                 calib_fraction=0.1, random_state=0):
        self.input_size = input_size
        self.base_filters = base_filters
        self.levels = levels
        self.p_drop = p_drop
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.n_mc_train = n_mc_train
        self.n_mc_test = n_mc_test
        self.delta = delta
        self.tau = tau
        self.xi = xi
        self.lam = lam
        self.bin_threshold = bin_threshold
        self.percentile = percentile
        self.mode = mode
        self.calib_fraction = calib_fraction
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ULandDetector":
        return cls(
            input_size=cfg.arch.input_size, base_filters=cfg.arch.base_filters,
            levels=cfg.arch.levels, p_drop=cfg.arch.p_drop, epochs=cfg.train.epochs,
            batch_size=cfg.train.batch_size, lr=cfg.train.lr, n_mc_train=cfg.train.n_mc,
            n_mc_test=cfg.gating.n_mc, delta=cfg.gating.delta, tau=cfg.gating.tau,
            xi=cfg.gating.xi, lam=cfg.gating.lam, bin_threshold=cfg.gating.bin_threshold,
            percentile=cfg.gating.percentile, mode=cfg.mode, random_state=cfg.seeds.model,
        )

    def _configs(self):
        arch = ArchConfig(input_size=self.input_size, levels=self.levels,
                          base_filters=self.base_filters, p_drop=self.p_drop)
        tc = TrainConfig(lr=self.lr, n_mc=self.n_mc_train, epochs=self.epochs,
                         batch_size=self.batch_size)
        gating = GatingConfig(delta=self.delta, tau=self.tau, xi=self.xi, lam=self.lam,
                              bin_threshold=self.bin_threshold, percentile=self.percentile,
                              n_mc=self.n_mc_test)
        for c in (arch, tc, gating):
            c.validate()
        parse_mode(self.mode)
        return arch, tc, gating

    def _split_calibration(self, videos):
        n_calib = max(2, math.floor(self.calib_fraction * len(videos)))
        if len(videos) - n_calib < 1:
            raise ValueError(f"need more than {n_calib} videos to hold out a calibration set")
        order = np.random.default_rng(self.random_state).permutation(len(videos))
        calib = [videos[i] for i in order[:n_calib]]
        rest = [videos[i] for i in order[n_calib:]]
        return rest, calib

    def fit(self, X, y=None, calib=None):
        """Train on ``X`` (labelled videos); ``y`` is ignored."""
        arch, tc, gating = self._configs()
        videos = check_videos(X, arch.input_size, labelled=True)
        if calib is None:
            videos, calib = self._split_calibration(videos)
        else:
            calib = check_videos(calib, arch.input_size, labelled=True)
        self.delta_ = resolve_delta(self.delta, arch.input_size)
        self.model_ = build_model(arch, self.random_state)
        result = train(self.model_, videos, tc, self.delta_, seed=self.random_state)
        self.loss_trace_ = result.trace
        self.class_weights_ = result.class_weights
        self.stats_ = calibrate(self.model_, calib, gating, self.delta_, seed=self.random_state)
        self.n_train_videos_ = len(videos)
        return self

    def predict_measurements(self, X, mode=None):
        check_is_fitted(self, ["model_", "stats_"])
        videos = check_videos(X, self.input_size)
        return [predict_video(self.model_, self.stats_, v, mode or self.mode,
                              seed=self.random_state, q=self.percentile) for v in videos]

    def predict(self, X):
        return np.array([np.nan if m.rejected else m.reported_length
                         for m in self.predict_measurements(X)])

    def score(self, X, y=None):
        """Squared correlation (0..1) between predicted and reference lengths.

        ``y`` defaults to each video's labelled length; rejected videos are
        excluded.
        """
        videos = list(X)
        pred = self.predict(videos)
        gt = np.asarray(y if y is not None else [v.label.length_gt for v in videos], dtype=float)
        keep = ~np.isnan(pred)
        return r2_score(pred[keep], gt[keep]) / 100.0
