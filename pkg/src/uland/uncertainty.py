"""Per-frame heatmaps with epistemic (MC dropout) and aleatoric (sigma head) maps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .bunet import BUNet, forward


@dataclass
class Prediction:
    heatmap: np.ndarray  # mean of MC-dropout sigmoid samples
    epistemic: np.ndarray  # population std of the same samples
    aleatoric: np.ndarray  # sigma map of the deterministic pass
    frame_index: int = 0
    heatmap_det: Optional[np.ndarray] = None  # sigmoid(mu) of the deterministic pass


def frame_generator(seed: int, frame_index: int) -> torch.Generator:
    """Dropout stream for one frame; independent of the order frames are visited."""
    state = np.random.SeedSequence([int(seed), int(frame_index)]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def mc_dropout_predict(model: BUNet, frame: np.ndarray, n_samples: int = 30,
                       rng: Union[int, torch.Generator] = 0, frame_index: int = 0) -> Prediction:
    """Run ``n_samples`` dropout-enabled passes; mean and std of sigmoid outputs.

    ``rng`` is either a generator or an integer seed combined with
    ``frame_index``. The aleatoric field is left empty (zeros); use
    :func:`predict_frame` for a complete prediction.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    gen = rng if isinstance(rng, torch.Generator) else frame_generator(rng, frame_index)
    stack = np.repeat(np.asarray(frame, dtype=np.float32)[None], n_samples, axis=0)
    mu, _ = forward(model, stack, dropout_enabled=True, rng=gen)
    samples = torch.sigmoid(mu.double()).numpy()
    # shift by the first sample so identical samples give exactly zero spread
    ref = samples[0]
    dev = samples - ref
    shift = dev.mean(axis=0)
    heatmap = np.clip(ref + shift, samples.min(axis=0), samples.max(axis=0))
    epistemic = np.sqrt(np.mean((dev - shift) ** 2, axis=0))  # population (ddof=0)
    return Prediction(heatmap=heatmap, epistemic=epistemic,
                      aleatoric=np.zeros_like(heatmap), frame_index=frame_index)


def aleatoric_predict(model: BUNet, frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One deterministic pass (dropout off, eps = 0): (sigmoid(mu), sigma)."""
    mu, sigma = forward(model, frame, dropout_enabled=False)
    return torch.sigmoid(mu.double()).numpy(), sigma.double().numpy()


def predict_frame(model: BUNet, frame: np.ndarray, n_samples: int = 30,
                  seed: int = 0, frame_index: int = 0) -> Prediction:
    pred = mc_dropout_predict(model, frame, n_samples, seed, frame_index)
    pred.heatmap_det, pred.aleatoric = aleatoric_predict(model, frame)
    return pred


def predict_frames(model: BUNet, video, n_samples: int = 30, seed: int = 0) -> list[Prediction]:
    """Predictions for every frame of ``video``, using only its pixels."""
    return [predict_frame(model, video.frame(i), n_samples, seed, i) for i in range(video.n_frames)]


def uncertainty_scalar(umap: np.ndarray) -> float:
    """Sum of all pixel uncertainties."""
    return float(np.sum(umap, dtype=np.float64))


def write_pgm(image: np.ndarray, path: str | Path, vmax: Optional[float] = None) -> None:
    """8-bit binary PGM, linearly scaled so that ``vmax`` (default: image max) maps to 255."""
    image = np.asarray(image, dtype=np.float64)
    top = float(vmax if vmax is not None else image.max())
    scaled = np.zeros_like(image) if top <= 0 else np.clip(image / top, 0.0, 1.0)
    data = np.rint(scaled * 255).astype(np.uint8)
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def dump_prediction(pred: Prediction, directory: str | Path, prefix: str = "") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("heatmap", "epistemic", "aleatoric"):
        path = directory / f"{prefix}{pred.frame_index:04d}_{name}.pgm"
        write_pgm(getattr(pred, name), path, vmax=1.0 if name == "heatmap" else None)
        paths.append(path)
    return paths
