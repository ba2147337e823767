"""Procedural moving-shape clips with exact object masks and prompt tokens."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import RandomStream
from .numerics.uptn import read_tensor, write_tensor

COLORS = {
    "red": (0.9, -0.7, -0.7),
    "green": (-0.7, 0.9, -0.7),
    "blue": (-0.7, -0.7, 0.9),
    "yellow": (0.9, 0.9, -0.7),
}
SHAPES = ("square", "circle", "triangle")
MOTIONS = ("linear", "circular")
NULL_TOKEN = 0
BACKGROUND_AMPLITUDE = 0.2


@dataclass(frozen=True)
class ScenePrompt:
    token_id: int
    color: str
    shape_kind: str
    motion_kind: str

    @property
    def canonical_color(self):
        return np.array(COLORS[self.color], dtype=np.float32)

    @property
    def name(self):
        return f"{self.color}-{self.shape_kind}-{self.motion_kind}"


def _build_vocab():
    vocab = {}
    for i, (c, s, m) in enumerate(itertools.product(COLORS, SHAPES, MOTIONS), start=1):
        vocab[i] = ScenePrompt(i, c, s, m)
    return vocab


VOCAB = _build_vocab()
VOCAB_SIZE = len(VOCAB) + 1  # plus the null token


def prompt_by_name(name):
    if name in ("null", ""):
        return None
    for p in VOCAB.values():
        if p.name == name:
            return p
    raise KeyError(name)


def vocabulary_listing():
    return ", ".join(p.name for p in VOCAB.values())


@dataclass(frozen=True)
class ClipConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    shape_radius: int | None = None

    @property
    def radius(self):
        if self.shape_radius is not None:
            return self.shape_radius
        return max(2, min(self.height, self.width) // 6)


@dataclass
class SyntheticClip:
    video: np.ndarray  # [F, 3, H, W] in [-1, 1]
    object_mask: np.ndarray  # [F, 1, H, W]
    prompt: ScenePrompt
    seed: int
    centers: np.ndarray  # [F, 2] (y, x) of the shape's reference point


def _value_noise(H, W, stream, cells=4):
    grid = stream.uniform((cells + 2, cells + 2, 3), -1.0, 1.0)
    phase = stream.uniform(2)
    gy = np.arange(H) / H * cells + phase[0]
    gx = np.arange(W) / W * cells + phase[1]
    iy, ix = gy.astype(int), gx.astype(int)
    fy, fx = gy - iy, gx - ix
    sy = (fy * fy * (3 - 2 * fy))[:, None, None]
    sx = (fx * fx * (3 - 2 * fx))[None, :, None]
    g00 = grid[iy][:, ix]
    g01 = grid[iy][:, ix + 1]
    g10 = grid[iy + 1][:, ix]
    g11 = grid[iy + 1][:, ix + 1]
    top = g00 + (g01 - g00) * sx
    bot = g10 + (g11 - g10) * sx
    return (top + (bot - top) * sy).transpose(2, 0, 1)  # [3, H, W]


def _footprint(shape_kind, H, W, cy, cx, r):
    ys = np.arange(H)[:, None] - cy
    xs = np.arange(W)[None, :] - cx
    if shape_kind == "square":
        return (np.abs(ys) <= r) & (np.abs(xs) <= r)
    if shape_kind == "circle":
        return ys * ys + xs * xs <= r * r
    # apex up, base at +r
    return (ys >= -r) & (ys <= r) & (np.abs(xs) <= (ys + r) / 2.0)


def _trajectory(motion, F, H, W, r, stream):
    lo = np.array([r, r], dtype=np.float64)
    hi = np.array([H - 1 - r, W - 1 - r], dtype=np.float64)
    s = np.arange(F) / (F - 1)
    if motion == "linear":
        # integer start and per-frame velocity keep rasterised centroids on the line
        vmax = (hi - lo) // (F - 1)
        v = np.array([int(stream.integers(-vmax[0], vmax[0] + 1)), int(stream.integers(-vmax[1], vmax[1] + 1))])
        travel = v * (F - 1)
        start_lo = lo - np.minimum(travel, 0)
        start_hi = hi - np.maximum(travel, 0)
        p0 = np.array([int(stream.integers(start_lo[k], start_hi[k] + 1)) for k in range(2)], dtype=np.float64)
        return p0[None, :] + np.arange(F)[:, None] * v[None, :]
    span = (hi - lo) / 2.0
    orbit = float(stream.uniform(None, 0.4, 0.9)) * float(span.min())
    centre = lo + span
    theta0 = float(stream.uniform(None, 0.0, 2 * np.pi))
    sweep = float(stream.uniform(None, 0.5, 1.0)) * np.pi * (1 if stream.uniform() < 0.5 else -1)
    theta = theta0 + s * sweep
    return centre[None, :] + orbit * np.stack([np.sin(theta), np.cos(theta)], axis=1)


def render_clip(config: ClipConfig, prompt: ScenePrompt, seed: int) -> SyntheticClip:
    """Deterministically render one clip from its own seed."""
    F, H, W, r = config.frames, config.height, config.width, config.radius
    if F < 2 or H < 8 or W < 8:
        raise ValueError(f"need F >= 2 and H, W >= 8, got {F}x{H}x{W}")
    if 2 * r + 1 > min(H, W):
        raise ValueError(f"shape radius {r} does not fit a {H}x{W} frame")
    stream = RandomStream(seed)
    bg = BACKGROUND_AMPLITUDE * _value_noise(H, W, stream.spawn("background"))
    centers = _trajectory(prompt.motion_kind, F, H, W, r, stream.spawn("motion"))
    color = prompt.canonical_color[:, None, None]
    video = np.empty((F, 3, H, W), dtype=np.float32)
    mask = np.zeros((F, 1, H, W), dtype=np.float32)
    for f in range(F):
        fp = _footprint(prompt.shape_kind, H, W, centers[f, 0], centers[f, 1], r)
        video[f] = np.where(fp[None], color, bg)
        mask[f, 0] = fp
    np.clip(video, -1.0, 1.0, out=video)
    return SyntheticClip(video, mask, prompt, seed, centers)


def gen_clip(config: ClipConfig, prompt: ScenePrompt, stream) -> SyntheticClip:
    return render_clip(config, prompt, stream.seed64())


def gen_dataset(n: int, config: ClipConfig, stream, motion=None):
    """``n`` clips with prompts uniform over the non-null vocabulary.

    ``motion`` restricts prompts to one motion law (used for held-out
    evaluation sets).
    """
    if n < 1:
        raise ValueError("need at least one clip")
    ids = [k for k, p in VOCAB.items() if motion is None or p.motion_kind == motion]
    picks = stream.spawn("prompts").integers(0, len(ids), n)
    return [gen_clip(config, VOCAB[ids[int(k)]], stream.spawn(f"clip{i}")) for i, k in enumerate(picks)]


def save_dataset(clips, directory):
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for i, clip in enumerate(clips):
        d = root / f"clip_{i:06d}"
        d.mkdir(exist_ok=True)
        write_tensor(d / "video.uptn", clip.video, precision=4)
        write_tensor(d / "mask.uptn", clip.object_mask, precision=4)
        meta = {
            "token_id": clip.prompt.token_id,
            "shape": clip.prompt.shape_kind,
            "color": clip.prompt.color,
            "motion": clip.prompt.motion_kind,
            "seed": str(clip.seed),
        }
        (d / "prompt.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(directory):
    root = Path(directory)
    dirs = sorted(p for p in root.glob("clip_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no clip_* directories under {root}")
    clips = []
    for d in dirs:
        meta = json.loads((d / "prompt.json").read_text())
        prompt = VOCAB[int(meta["token_id"])]
        clips.append(
            SyntheticClip(
                read_tensor(d / "video.uptn"),
                read_tensor(d / "mask.uptn"),
                prompt,
                int(meta["seed"]),
                None,
            )
        )
    return clips
