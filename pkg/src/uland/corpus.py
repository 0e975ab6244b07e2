"""Synthetic video corpus: generation, splitting and on-disk persistence.

Each video shows a bright ribbon whose two end caps are the landmarks. A
cosine visibility cycle modulates the ribbon contrast; frames near the peak
of the cycle are key frames, and exactly one of them carries a (noisy)
label. Speckle and wandering distractor blobs are present on every frame.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy import ndimage, special

from .config import GenConfig, from_dict, to_dict
from .exceptions import ConfigError, FormatError, GenerationError

VIDEO_MAGIC = b"ULVD1"
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "calib", "test")
# speckle looks at which label noise equals GenConfig.label_noise_std
REFERENCE_LOOKS = 4.0


@dataclass(eq=False)
class LandmarkLabel:
    points: np.ndarray  # (tau, 2) as (row, col)
    length_gt: float

    def __eq__(self, other):
        if not isinstance(other, LandmarkLabel):
            return NotImplemented
        return np.array_equal(self.points, other.points) and self.length_gt == other.length_gt


@dataclass(eq=False)
class SyntheticVideo:
    frames: np.ndarray  # (P, H, W) float32 in [0, 1]
    labeled_key_index: int
    label: LandmarkLabel
    key_set: frozenset[int]
    pixel_spacing: float
    seed: int
    video_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def frame(self, index: int) -> np.ndarray:
        return self.frames[index]

    def __eq__(self, other):
        if not isinstance(other, SyntheticVideo):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.seed == other.seed
            and self.labeled_key_index == other.labeled_key_index
            and self.key_set == other.key_set
            and self.pixel_spacing == other.pixel_spacing
            and self.label == other.label
            and self.frames.dtype == other.frames.dtype
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(eq=False)
class Corpus:
    train: list[SyntheticVideo]
    calib: list[SyntheticVideo]
    test: list[SyntheticVideo]
    generation_config: GenConfig = field(default_factory=GenConfig)
    master_seed: int = 0

    def split(self, name: str) -> list[SyntheticVideo]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def iter_videos(self) -> Iterator[tuple[str, SyntheticVideo]]:
        for name in SPLITS:
            for video in self.split(name):
                yield name, video

    def find(self, video_id: str) -> SyntheticVideo:
        for _, video in self.iter_videos():
            if video.video_id == video_id:
                return video
        raise KeyError(f"no video with id {video_id!r}")

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            to_dict(self.generation_config) == to_dict(other.generation_config)
            and self.master_seed == other.master_seed
            and all(self.split(s) == other.split(s) for s in SPLITS)
        )


# --------------------------------------------------------------------------
# generation


def visibility(t: np.ndarray, phase: float, period: float, gamma: float) -> np.ndarray:
    """max(0, cos(2 pi (t - phase) / period)) ** gamma."""
    c = np.cos(2.0 * np.pi * (np.asarray(t, dtype=np.float64) - phase) / period)
    return np.maximum(c, 0.0) ** gamma


@dataclass
class VideoPlan:
    """Everything about a video except the rendered pixels."""

    n_frames: int
    phase: float
    visibility: np.ndarray  # (P,)
    endpoints: np.ndarray  # (P, 2, 2)
    contrast: np.ndarray  # (P,)
    distractors: np.ndarray  # (P, n, 2) centres
    distractor_amp: np.ndarray  # (n,)
    distractor_sigma: np.ndarray  # (n,)
    texture: np.ndarray  # (H, W) static background
    looks: float  # speckle looks at full visibility
    key_set: frozenset[int]
    labeled_key_index: int
    label_points: np.ndarray  # (2, 2)


def plan_video(cfg: GenConfig, seed: int) -> VideoPlan:
    cfg.validate()
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width
    P = int(rng.integers(cfg.n_frames_min, cfg.n_frames_max + 1))
    # a visibility peak always falls inside the clip
    phase = float(rng.uniform(0.0, min(cfg.period, P - 1)))
    t = np.arange(P)
    vis = visibility(t, phase, cfg.period, cfg.gamma)

    key_set = frozenset(int(i) for i in np.flatnonzero(vis >= cfg.v_key))
    if not key_set:
        raise GenerationError(
            f"seed {seed}: no frame reaches v_key={cfg.v_key} (P={P}, phase={phase:.3f})")
    peak = int(np.argmax(vis))  # argmax returns the first maximum
    candidates = sorted(i for i in key_set if abs(i - peak) <= cfg.key_jitter)
    k = int(candidates[rng.integers(len(candidates))])

    length = rng.uniform(cfg.length_min, cfg.length_max)
    shrink = rng.uniform(cfg.shrink_min, cfg.shrink_max)
    theta = rng.uniform(0.0, np.pi)
    centre = np.array([H / 2.0, W / 2.0]) + rng.uniform(-1.0, 1.0, size=2) * cfg.centre_jitter
    motion_dir = rng.normal(size=2)
    motion_dir /= np.linalg.norm(motion_dir)
    motion_phase = rng.uniform(0.0, 2 * np.pi)

    direction = np.array([np.sin(theta), np.cos(theta)])
    lengths = length * (1.0 - shrink * (1.0 - vis))
    offsets = cfg.motion_amplitude * np.sin(2 * np.pi * t / cfg.period + motion_phase)
    centres = centre[None, :] + offsets[:, None] * motion_dir[None, :]
    half = (lengths / 2.0)[:, None] * direction[None, :]
    endpoints = np.stack([centres - half, centres + half], axis=1)
    margin = cfg.cap_radius + 1.0
    endpoints[..., 0] = np.clip(endpoints[..., 0], margin, H - 1 - margin)
    endpoints[..., 1] = np.clip(endpoints[..., 1], margin, W - 1 - margin)

    n_dis = int(rng.integers(cfg.n_distractors_min, cfg.n_distractors_max + 1))
    amp = rng.uniform(*cfg.distractor_amplitude, size=n_dis)
    sig = rng.uniform(*cfg.distractor_sigma, size=n_dis)
    pos = np.empty((P, n_dis, 2))
    lo, hi = np.array([4.0, 4.0]), np.array([H - 5.0, W - 5.0])
    cur = rng.uniform(lo, hi, size=(n_dis, 2))
    for i in range(P):
        pos[i] = cur
        cur = cur + rng.normal(0.0, cfg.distractor_step, size=(n_dis, 2))
        # reflect at the borders
        cur = np.where(cur < lo, 2 * lo - cur, cur)
        cur = np.where(cur > hi, 2 * hi - cur, cur)

    raw = rng.normal(size=(H, W))
    texture = ndimage.gaussian_filter(raw, sigma=3.0)
    texture = cfg.background * (1.0 + 0.6 * texture / (texture.std() + 1e-12))
    texture = np.clip(texture, 0.0, None)

    looks = float(rng.uniform(*cfg.speckle_looks))
    noise_std = cfg.label_noise_std * REFERENCE_LOOKS / looks
    noise = rng.normal(0.0, noise_std, size=(2, 2)) if noise_std > 0 else np.zeros((2, 2))
    label_points = endpoints[k] + noise
    label_points[:, 0] = np.clip(label_points[:, 0], 0.0, H - 1)
    label_points[:, 1] = np.clip(label_points[:, 1], 0.0, W - 1)

    return VideoPlan(
        n_frames=P,
        phase=phase,
        visibility=vis,
        endpoints=endpoints,
        contrast=cfg.contrast * (cfg.visibility_floor + (1.0 - cfg.visibility_floor) * vis),
        distractors=pos,
        distractor_amp=amp,
        distractor_sigma=sig,
        texture=texture,
        looks=looks,
        key_set=key_set,
        labeled_key_index=k,
        label_points=label_points,
    )


def _grid(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")


def render_ribbon(endpoints: np.ndarray, contrast: float, H: int, W: int,
                  width: float, cap_radius: float) -> np.ndarray:
    """Noise-free ribbon layer: a thin bar with two bright end caps."""
    rr, cc = _grid(H, W)
    a, b = endpoints[0], endpoints[1]
    ab = b - a
    denom = float(ab @ ab) or 1.0
    s = np.clip(((rr - a[0]) * ab[0] + (cc - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dr = rr - (a[0] + s * ab[0])
    dc = cc - (a[1] + s * ab[1])
    bar = 0.6 * np.exp(-(dr ** 2 + dc ** 2) / (2 * width ** 2))
    caps = np.zeros((H, W))
    for p in (a, b):
        d = np.sqrt((rr - p[0]) ** 2 + (cc - p[1]) ** 2)
        caps = np.maximum(caps, 1.0 / (1.0 + np.exp((d - cap_radius) / 0.5)))
    return contrast * np.maximum(bar, caps)


def ribbon_mask(endpoints: np.ndarray, H: int, W: int, width: float, cap_radius: float) -> np.ndarray:
    """Pixels belonging to the ribbon (bar core plus caps)."""
    layer = render_ribbon(endpoints, 1.0, H, W, width, cap_radius)
    return layer >= 0.3


def ribbon_layer(cfg: GenConfig, plan: VideoPlan, index: int) -> np.ndarray:
    """Ribbon as rendered in frame ``index``: dimmer and blurrier as visibility drops."""
    layer = render_ribbon(plan.endpoints[index], plan.contrast[index], cfg.height, cfg.width,
                          cfg.ribbon_width, cfg.cap_radius)
    blur = cfg.hidden_blur * (1.0 - plan.visibility[index])
    if blur > 0:
        layer = ndimage.gaussian_filter(layer, blur, mode="constant")
    return layer


def render_video(cfg: GenConfig, plan: VideoPlan, rng: np.random.Generator) -> np.ndarray:
    H, W = cfg.height, cfg.width
    rr, cc = _grid(H, W)
    frames = np.empty((plan.n_frames, H, W), dtype=np.float32)
    rho = cfg.speckle_correlation
    z = rng.standard_normal((H, W))
    for i in range(plan.n_frames):
        img = plan.texture + ribbon_layer(cfg, plan, i)
        for (r, c), a, s in zip(plan.distractors[i], plan.distractor_amp, plan.distractor_sigma):
            img = img + a * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * s ** 2))
        if i:
            z = rho * z + math.sqrt(1.0 - rho * rho) * rng.standard_normal((H, W))
        v = plan.visibility[i]
        looks = v * plan.looks + (1.0 - v) * cfg.hidden_speckle_looks
        frames[i] = np.clip(img * speckle_field(z, looks), 0.0, 1.0)
    return frames


def speckle_field(z: np.ndarray, looks: float) -> np.ndarray:
    """Map standard normal ``z`` to unit-mean Gamma(looks) speckle (Gaussian copula)."""
    u = np.clip(special.ndtr(z), 1e-12, 1.0 - 1e-12)
    return special.gammaincinv(looks, u) / looks


def generate_video(gen_config: GenConfig, seed: int, video_id: str = "") -> SyntheticVideo:
    """Render one video; bit-identical for identical ``(gen_config, seed)``."""
    plan = plan_video(gen_config, seed)
    # pixel noise uses its own stream so the plan does not depend on rendering
    frames = render_video(gen_config, plan, np.random.default_rng([seed, 1]))
    pts = plan.label_points
    length_gt = float(np.hypot(*(pts[1] - pts[0])) * gen_config.pixel_spacing)
    return SyntheticVideo(
        frames=frames,
        labeled_key_index=plan.labeled_key_index,
        label=LandmarkLabel(points=pts, length_gt=length_gt),
        key_set=plan.key_set,
        pixel_spacing=gen_config.pixel_spacing,
        seed=int(seed),
        video_id=video_id,
    )


def split_sizes(n_videos: int) -> tuple[int, int, int]:
    """(train, calib, test): 10% test, then 10% of the rest for calibration.

    Sizes are floored with a minimum of one video for calib and test; the
    remainder goes to train.
    """
    if n_videos < 10:
        raise ConfigError(f"n_videos={n_videos} is too small to populate train/calib/test")
    n_test = max(1, math.floor(0.1 * n_videos))
    n_calib = max(1, math.floor(0.1 * (n_videos - n_test)))
    n_train = n_videos - n_test - n_calib
    return n_train, n_calib, n_test


def video_seed(master_seed: int, index: int) -> int:
    return int(master_seed) * 1_000_000 + int(index)


def generate_corpus(gen_config: GenConfig, n_videos: int, master_seed: int) -> Corpus:
    n_train, n_calib, n_test = split_sizes(n_videos)
    videos = [generate_video(gen_config, video_seed(master_seed, i), video_id=f"v{i:05d}")
              for i in range(n_videos)]
    order = np.random.default_rng([master_seed, 7]).permutation(n_videos)
    shuffled = [videos[i] for i in order]
    return Corpus(
        train=shuffled[:n_train],
        calib=shuffled[n_train:n_train + n_calib],
        test=shuffled[n_train + n_calib:],
        generation_config=gen_config,
        master_seed=int(master_seed),
    )


# --------------------------------------------------------------------------
# persistence


def write_video_file(path: Path, frames: np.ndarray) -> None:
    P, H, W = frames.shape
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<III", P, H, W))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_video_file(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = len(VIDEO_MAGIC) + 12
    if len(data) < header:
        raise FormatError(f"{path.name}: truncated header ({len(data)} bytes)")
    if data[:len(VIDEO_MAGIC)] != VIDEO_MAGIC:
        raise FormatError(f"{path.name}: bad magic {data[:len(VIDEO_MAGIC)]!r}")
    P, H, W = struct.unpack("<III", data[len(VIDEO_MAGIC):header])
    expected = P * H * W * 4
    payload = data[header:]
    if len(payload) != expected:
        raise FormatError(
            f"{path.name}: truncated or oversized payload: {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(P, H, W).astype(np.float32)


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, video in corpus.iter_videos():
        fname = f"{video.video_id}.ulvd"
        write_video_file(root / fname, video.frames)
        P, H, W = video.frames.shape
        entries.append({
            "id": video.video_id,
            "file": fname,
            "P": P,
            "H": H,
            "W": W,
            "k": video.labeled_key_index,
            "K": sorted(video.key_set),
            "label_points": video.label.points.tolist(),
            "length_gt": video.label.length_gt,
            "pixel_spacing": video.pixel_spacing,
            "split": split,
            "seed": video.seed,
        })
    manifest = {
        "format": "uland-corpus",
        "version": 1,
        "master_seed": corpus.master_seed,
        "generation_config": to_dict(corpus.generation_config),
        "videos": entries,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


_REQUIRED = ("id", "file", "P", "H", "W", "k", "K", "label_points", "length_gt",
             "pixel_spacing", "split", "seed")


def _field(entry: dict, name: str, kind, where: str):
    if name not in entry:
        raise FormatError(f"{where}: missing field {name!r}")
    value = entry[name]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise FormatError(f"{where}: field {name!r} must be an integer")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise FormatError(f"{where}: field {name!r} must be a number")
    if kind is str and not isinstance(value, str):
        raise FormatError(f"{where}: field {name!r} must be a string")
    if kind is list and not isinstance(value, list):
        raise FormatError(f"{where}: field {name!r} must be a list")
    return value


def read_corpus(path: str | Path) -> Corpus:
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise FormatError(f"{mpath}: manifest not found")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{MANIFEST_NAME}: invalid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != "uland-corpus":
        raise FormatError(f"{MANIFEST_NAME}: field 'format' missing or not 'uland-corpus'")
    try:
        gen = from_dict(GenConfig, manifest.get("generation_config", {}), "generation_config")
    except ConfigError as exc:
        raise FormatError(f"{MANIFEST_NAME}: {exc}") from exc
    videos = _field(manifest, "videos", list, MANIFEST_NAME)
    master_seed = _field(manifest, "master_seed", int, MANIFEST_NAME)

    splits: dict[str, list[SyntheticVideo]] = {s: [] for s in SPLITS}
    for n, entry in enumerate(videos):
        where = f"{MANIFEST_NAME}: videos[{n}]"
        if not isinstance(entry, dict):
            raise FormatError(f"{where}: expected an object")
        vals = {name: _field(entry, name, kind, where) for name, kind in zip(
            _REQUIRED, (str, str, int, int, int, int, list, list, float, float, str, int))}
        if vals["split"] not in splits:
            raise FormatError(f"{where}: field 'split' has unknown value {vals['split']!r}")
        frames = read_video_file(root / vals["file"])
        if frames.shape != (vals["P"], vals["H"], vals["W"]):
            raise FormatError(
                f"{where}: field 'P/H/W' = {(vals['P'], vals['H'], vals['W'])} does not match "
                f"{vals['file']} payload shape {frames.shape}")
        key_set = frozenset(int(i) for i in vals["K"])
        if vals["k"] not in key_set or not 0 <= vals["k"] < vals["P"]:
            raise FormatError(f"{where}: field 'k' = {vals['k']} is not a valid key frame")
        points = np.asarray(vals["label_points"], dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise FormatError(f"{where}: field 'label_points' must be a list of (row, col) pairs")
        splits[vals["split"]].append(SyntheticVideo(
            frames=frames,
            labeled_key_index=vals["k"],
            label=LandmarkLabel(points=points, length_gt=float(vals["length_gt"])),
            key_set=key_set,
            pixel_spacing=float(vals["pixel_spacing"]),
            seed=vals["seed"],
            video_id=vals["id"],
        ))
    return Corpus(train=splits["train"], calib=splits["calib"], test=splits["test"],
                  generation_config=gen, master_seed=master_seed)


def load_split(path: str | Path, split: str, video_id: Optional[str] = None) -> list[SyntheticVideo]:
    corpus = read_corpus(path)
    if video_id is not None:
        return [corpus.find(video_id)]
    return corpus.split(split)
