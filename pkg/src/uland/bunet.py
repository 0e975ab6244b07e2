"""Bayesian U-Net with a heatmap head and an aleatoric (logit-scale) head.

Dropout masks are drawn from explicit ``torch.Generator`` objects rather
than the global RNG, so MC passes are reproducible per frame and training
is reproducible per seed.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .config import ArchConfig, AugConfig, TrainConfig
from .exceptions import FormatError, TrainingError
from .maskgen import rasterize_mask

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"ULWT1"
PROB_EPS = 1e-7
DICE_SMOOTH = 1.0


class MCDropout(nn.Module):
    """Element-wise dropout whose masks come from ``self.generator``.

    ``active`` is toggled independently of ``Module.training`` so that batch
    norm can stay in inference mode while dropout keeps sampling.
    """

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.active = False
        self.generator: Optional[torch.Generator] = None

    def forward(self, x):
        if not self.active or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype, device=x.device) >= self.p
        return x * keep / (1.0 - self.p)


class ConvBlock(nn.Sequential):
    """Two conv -> batchnorm -> ReLU -> dropout units."""

    def __init__(self, cin: int, cout: int, arch: ArchConfig):
        torch_momentum = 1.0 - arch.batchnorm_momentum
        layers = []
        for c_in in (cin, cout):
            layers += [
                nn.Conv2d(c_in, cout, arch.kernel, padding=arch.kernel // 2),
                nn.BatchNorm2d(cout, momentum=torch_momentum),
                nn.ReLU(inplace=True),
                MCDropout(arch.p_drop),
            ]
        super().__init__(*layers)


class BUNet(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        b = arch.base_filters
        widths = [b * 2 ** i for i in range(arch.levels)]
        self.encoder = nn.ModuleList()
        cin = 1
        for w in widths:
            self.encoder.append(ConvBlock(cin, w, arch))
            cin = w
        self.bottleneck = ConvBlock(cin, cin * 2, arch)
        cin *= 2
        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for w in reversed(widths):
            self.upsample.append(nn.ConvTranspose2d(cin, w, kernel_size=2, stride=2))
            self.decoder.append(ConvBlock(2 * w, w, arch))
            cin = w
        self.mu_head = nn.Conv2d(b, 1, kernel_size=1)
        self.sigma_head = nn.Conv2d(b, 1, kernel_size=1)

    def dropout_layers(self) -> list[MCDropout]:
        return [m for m in self.modules() if isinstance(m, MCDropout)]

    def set_dropout(self, active: bool, generator: Optional[torch.Generator] = None) -> None:
        for m in self.dropout_layers():
            m.active = active
            m.generator = generator

    def forward(self, x):
        """``x``: (N, 1, H, W). Returns (mu_logits, sigma), each (N, H, W)."""
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, block in zip(self.upsample, self.decoder):
            x = block(torch.cat([up(x), skips.pop()], dim=1))
        mu = self.mu_head(x)[:, 0]
        sigma = F.softplus(self.sigma_head(x)[:, 0]) + self.arch.sigma_floor
        return mu, sigma


def build_model(arch: ArchConfig, seed: int) -> BUNet:
    arch.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = BUNet(arch)
    model.eval()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _as_batch(frames, size: int) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(frames, dtype=np.float32))
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-2:] != (size, size):
        raise ValueError(f"expected frames of shape ({size}, {size}), got {tuple(x.shape)}")
    return x[:, None]


def forward(model: BUNet, frame, dropout_enabled: bool = False,
            rng: Optional[torch.Generator] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Inference pass on one frame (H, W) or a stack (N, H, W).

    Batch norm always uses running statistics here; only dropout is
    stochastic, and only when ``dropout_enabled``.
    """
    x = _as_batch(frame, model.arch.input_size)
    was_training = model.training
    model.eval()
    model.set_dropout(dropout_enabled, rng)
    try:
        with torch.no_grad():
            mu, sigma = model(x)
    finally:
        model.set_dropout(False)
        model.train(was_training)
    if np.ndim(frame) == 2:
        return mu[0], sigma[0]
    return mu, sigma


# --------------------------------------------------------------------------
# losses


def mc_integrated_probability(mu: torch.Tensor, sigma: torch.Tensor, n_samples: int,
                              rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean of sigmoid(mu + sigma * eps) over ``n_samples`` standard-normal draws.

    Differentiable in both ``mu`` and ``sigma`` (reparameterization).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    eps = torch.randn((n_samples,) + tuple(mu.shape), generator=rng, dtype=mu.dtype, device=mu.device)
    base = torch.sigmoid(mu)
    # averaging deviations from sigmoid(mu) keeps sigma = 0 exact for any sample count
    dev = torch.sigmoid(mu.unsqueeze(0) + sigma.unsqueeze(0) * eps) - base.unsqueeze(0)
    return base + dev.mean(dim=0)


def soft_dice_loss(p: torch.Tensor, mask: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - (2 sum(p*m) + s) / (sum(p) + sum(m) + s); batches are averaged."""
    mask = mask.to(p.dtype)
    dims = (-2, -1)
    inter = (p * mask).sum(dim=dims)
    denom = p.sum(dim=dims) + mask.sum(dim=dims)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def wbce_loss(p: torch.Tensor, mask: torch.Tensor, class_weights: tuple[float, float] = (1.0, 1.0)) -> torch.Tensor:
    w_fg, w_bg = class_weights
    mask = mask.to(p.dtype)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(w_fg * mask * torch.log(p) + w_bg * (1.0 - mask) * torch.log1p(-p)).mean()


def class_weights_from_masks(masks: Sequence[np.ndarray]) -> tuple[float, float]:
    """Inverse-frequency weights N/(2 N_fg), N/(2 N_bg) over the whole training set."""
    total = sum(int(m.size) for m in masks)
    fg = sum(int(np.count_nonzero(m)) for m in masks)
    bg = total - fg
    if fg == 0 or bg == 0:
        raise TrainingError("training masks must contain both foreground and background pixels")
    return total / (2.0 * fg), total / (2.0 * bg)


def composite_loss(mu, sigma, mask, class_weights, n_samples, rng, train_config: TrainConfig):
    p = mc_integrated_probability(mu, sigma, n_samples, rng)
    dice = soft_dice_loss(p, mask)
    wbce = wbce_loss(p, mask, class_weights)
    total = train_config.dice_weight * dice + train_config.wbce_weight * wbce
    return total, dice, wbce


# --------------------------------------------------------------------------
# augmentation


def augment(frame: np.ndarray, mask: np.ndarray, aug: AugConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random shift/rotation/zoom applied to both images, gamma to the frame only."""
    shift = rng.uniform(-aug.shift, aug.shift, size=2)
    angle = math.radians(rng.uniform(-aug.rotation, aug.rotation))
    zoom = rng.uniform(*aug.zoom)
    gamma = rng.uniform(*aug.gamma)
    return apply_transform(frame, mask, shift, angle, zoom, gamma)


def apply_transform(frame, mask, shift, angle: float, zoom: float, gamma: float):
    """Deterministic core of :func:`augment` (angle in radians, counter-clockwise)."""
    frame = np.asarray(frame, dtype=np.float32)
    mask = np.asarray(mask)
    if angle == 0.0 and zoom == 1.0 and not np.any(shift):
        out_f, out_m = frame.copy(), mask.copy()
    else:
        H, W = frame.shape
        centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
        cos, sin = math.cos(angle), math.sin(angle)
        # output -> input mapping for a rotation about the centre (row axis points down)
        rot = np.array([[cos, sin], [-sin, cos]])
        matrix = rot / zoom
        offset = centre - matrix @ (centre + np.asarray(shift, dtype=np.float64))
        out_f = ndimage.affine_transform(frame, matrix, offset, order=1, mode="constant", cval=0.0)
        out_m = ndimage.affine_transform(mask.astype(np.float32), matrix, offset, order=0,
                                         mode="constant", cval=0.0).astype(mask.dtype)
    if gamma != 1.0:
        out_f = np.power(np.clip(out_f, 0.0, 1.0), gamma)
    return out_f.astype(np.float32), out_m


# --------------------------------------------------------------------------
# training


@dataclass
class LossRecord:
    epoch: int
    dice: float
    wbce: float
    total: float


@dataclass
class TrainResult:
    model: BUNet
    trace: list[LossRecord] = field(default_factory=list)
    class_weights: tuple[float, float] = (1.0, 1.0)


def training_pairs(videos, delta: float) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """(frame, mask) for the labelled key frame of each video, and nothing else."""
    frames, masks = [], []
    for video in videos:
        k = video.labeled_key_index
        frame = video.frame(k)
        H, W = frame.shape
        frames.append(np.asarray(frame, dtype=np.float32))
        masks.append(rasterize_mask(video.label, delta, H, W))
    return frames, masks


def train(model: BUNet, train_videos, train_config: TrainConfig, delta: float,
          seed: int = 0, on_epoch: Optional[Callable[[LossRecord], None]] = None,
          augment_enabled: bool = True) -> TrainResult:
    """Fit ``model`` in place on the labelled key frames of ``train_videos``."""
    train_config.validate()
    frames, masks = training_pairs(train_videos, delta)
    if not frames:
        raise TrainingError("no training videos")
    return fit_pairs(model, frames, masks, train_config, seed, on_epoch, augment_enabled)


def fit_pairs(model: BUNet, frames, masks, train_config: TrainConfig, seed: int = 0,
              on_epoch=None, augment_enabled: bool = True) -> TrainResult:
    weights = class_weights_from_masks(masks)
    np_rng = np.random.default_rng([seed, 11])
    drop_gen = torch.Generator().manual_seed(seed * 2 + 1)
    eps_gen = torch.Generator().manual_seed(seed * 2 + 2)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr,
                           betas=(train_config.beta1, train_config.beta2))
    n = len(frames)
    trace = []
    model.train()
    model.set_dropout(True, drop_gen)
    try:
        for epoch in range(train_config.epochs):
            order = np_rng.permutation(n)
            sums = np.zeros(3)
            for start in range(0, n, train_config.batch_size):
                idx = order[start:start + train_config.batch_size]
                if augment_enabled:
                    pairs = [augment(frames[i], masks[i], train_config.augment, np_rng) for i in idx]
                else:
                    pairs = [(frames[i], masks[i]) for i in idx]
                x = torch.from_numpy(np.stack([f for f, _ in pairs]))[:, None]
                y = torch.from_numpy(np.stack([m for _, m in pairs]).astype(np.float32))
                if len(idx) == 1:
                    # batch norm cannot estimate statistics from a single sample
                    x = x.repeat(2, 1, 1, 1)
                    y = y.repeat(2, 1, 1)
                mu, sigma = model(x)
                total, dice, wbce = composite_loss(mu, sigma, y, weights, train_config.n_mc,
                                                   eps_gen, train_config)
                if not torch.isfinite(total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}: dice={dice.item()}, wbce={wbce.item()}")
                opt.zero_grad()
                total.backward()
                opt.step()
                sums += len(idx) * np.array([dice.item(), wbce.item(), total.item()])
            rec = LossRecord(epoch, *(sums / n))
            trace.append(rec)
            logger.info("epoch %d dice=%.4f wbce=%.4f total=%.4f", epoch, rec.dice, rec.wbce, rec.total)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        model.set_dropout(False)
        model.eval()
    return TrainResult(model=model, trace=trace, class_weights=weights)


def write_loss_trace(trace: Sequence[LossRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "dice", "wbce", "total"])
        for rec in trace:
            writer.writerow([rec.epoch, repr(rec.dice), repr(rec.wbce), repr(rec.total)])


# --------------------------------------------------------------------------
# weights file


def _named_tensors(model: BUNet) -> list[tuple[str, torch.Tensor]]:
    return [(name, t) for name, t in model.state_dict().items() if t.is_floating_point()]


def serialize_weights(model: BUNet) -> bytes:
    buf = io.BytesIO()
    tensors = _named_tensors(model)
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def weights_checksum(model: BUNet) -> str:
    return hashlib.sha256(serialize_weights(model)).hexdigest()


def save_weights(model: BUNet, path: str | Path) -> None:
    Path(path).write_bytes(serialize_weights(model))


def load_weights(model: BUNet, path: str | Path) -> BUNet:
    """Load a ``ULWT1`` file into ``model`` (whose architecture must match)."""
    path = Path(path)
    data = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path.name}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(WEIGHTS_MAGIC)) != WEIGHTS_MAGIC:
        raise FormatError(f"{path.name}: bad magic")
    (count,) = struct.unpack("<I", take(4))
    state = model.state_dict()
    loaded = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        numel = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * numel), dtype="<f4").reshape(shape)
        if name not in state:
            raise FormatError(f"{path.name}: unexpected tensor {name!r}")
        if tuple(state[name].shape) != tuple(shape):
            raise FormatError(f"{path.name}: tensor {name!r} has shape {shape}, "
                              f"model expects {tuple(state[name].shape)}")
        loaded[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise FormatError(f"{path.name}: {len(data) - pos} trailing bytes")
    missing = [n for n, _ in _named_tensors(model) if n not in loaded]
    if missing:
        raise FormatError(f"{path.name}: missing tensors {missing[:3]}")
    model.load_state_dict(loaded, strict=False)
    model.eval()
    return model

