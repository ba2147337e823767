"""Space-time mask taxonomy, the mixed-mask sampler and mask resizing.

Masks are ``[F, 1, H, W]`` float arrays holding exactly 0 or 1, where 1 marks
the region to synthesize.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .numerics.tensor import cubic_matrix

DEFAULT_PROBS = (0.4, 0.1, 0.2, 0.3)
DEFAULT_COVERAGE = (0.1, 0.5)
MAX_RANDOM_TRIES = 64


class MaskKind(enum.Enum):
    OBJECT = "object"
    RANDOM = "random"
    MARGINAL = "marginal"
    INTERPOLATION = "interpolation"


KIND_ORDER = (MaskKind.OBJECT, MaskKind.RANDOM, MaskKind.MARGINAL, MaskKind.INTERPOLATION)


@dataclass(frozen=True)
class MixedMaskPolicy:
    """Categorical mixture over :data:`KIND_ORDER` plus prompt dropout."""

    probabilities: tuple = DEFAULT_PROBS
    null_prompt_prob: float = 0.1
    object_dilation: int = 1
    coverage: tuple = DEFAULT_COVERAGE

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.shape != (4,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"mask probabilities must be 4 non-negative values summing to 1, got {self.probabilities}")
        if not 0.0 <= self.null_prompt_prob <= 1.0:
            raise ValueError("null_prompt_prob must lie in [0, 1]")

    @classmethod
    def spatial_only(cls, **kw):
        p = np.array(DEFAULT_PROBS[:3] + (0.0,))
        return cls(tuple(p / p.sum()), **kw)

    @classmethod
    def temporal_only(cls, **kw):
        return cls((0.0, 0.0, 0.0, 1.0), **kw)


def _check_binary(m, what="mask"):
    m = np.asarray(m)
    if m.ndim != 4 or m.shape[1] != 1:
        raise ValueError(f"{what} must be [F, 1, H, W], got {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{what} must be binary")
    return m


def make_object_mask(seg, dilation=1):
    """Per-frame dilation of a ground-truth footprint with a 4-neighbourhood."""
    seg = _check_binary(seg, "segmentation")
    if dilation < 0:
        raise ValueError("dilation radius must be non-negative")
    if dilation == 0:
        return seg.astype(np.float32)
    cross = ndimage.generate_binary_structure(2, 1)
    structure = np.zeros((1, 1, 3, 3), dtype=bool)
    structure[0, 0] = cross
    out = ndimage.binary_dilation(seg > 0, structure=structure, iterations=dilation)
    return out.astype(np.float32)


def _rasterize_rects(F, H, W, starts, ends, half_sizes, scale):
    ys = np.arange(H)[:, None] + 0.5
    xs = np.arange(W)[None, :] + 0.5
    m = np.zeros((F, 1, H, W), dtype=np.float32)
    for f in range(F):
        s = f / (F - 1) if F > 1 else 0.0
        frame = np.zeros((H, W), dtype=bool)
        for (cy0, cx0), (cy1, cx1), (hh, hw) in zip(starts, ends, half_sizes):
            cy = cy0 + s * (cy1 - cy0)
            cx = cx0 + s * (cx1 - cx0)
            frame |= (np.abs(ys - cy) <= hh * scale) & (np.abs(xs - cx) <= hw * scale)
        m[f, 0] = frame
    return m


def make_random_mask(F, H, W, coverage=DEFAULT_COVERAGE, stream=None, max_tries=MAX_RANDOM_TRIES):
    """Union of 1-3 rectangles whose centres drift linearly across frames.

    A coverage target is drawn from ``coverage`` and the rectangles are scaled
    by bisection until the measured volume coverage lands inside the range.
    """
    lo, hi = coverage
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"coverage range must satisfy 0 <= lo <= hi <= 1, got {coverage}")
    if hi == 0.0:
        return np.zeros((F, 1, H, W), dtype=np.float32)
    if lo == 1.0:
        return np.ones((F, 1, H, W), dtype=np.float32)
    for _ in range(max_tries):
        k = int(stream.integers(1, 4))
        starts = stream.uniform((k, 2)) * [H, W]
        ends = np.clip(starts + stream.uniform((k, 2), -0.25, 0.25) * [H, W], 0, [H, W])
        aspect = np.exp(stream.uniform(k, -0.7, 0.7))
        half_sizes = np.stack([np.sqrt(aspect), 1.0 / np.sqrt(aspect)], axis=1) * (min(H, W) / 4.0)
        target = float(stream.uniform(None, lo, hi))
        a, b = 0.0, 4.0 * max(H, W) / min(H, W)
        for _ in range(40):
            mid = 0.5 * (a + b)
            cov = _rasterize_rects(F, H, W, starts, ends, half_sizes, mid).mean()
            if cov < target:
                a = mid
            else:
                b = mid
        for scale in (b, a):
            m = _rasterize_rects(F, H, W, starts, ends, half_sizes, scale)
            if lo <= m.mean() <= hi:
                return m
    raise ValueError(f"could not reach coverage {coverage} after {max_tries} attempts")


def default_border(H, W):
    return (H // 4, W // 4)


def make_marginal_mask(F, H, W, border=None):
    """Mask every pixel within ``border`` of a frame edge, identically per frame."""
    if border is None:
        border = default_border(H, W)
    bh, bw = (border, border) if np.isscalar(border) else border
    if bh < 0 or bw < 0 or 2 * bh >= H or 2 * bw >= W:
        raise ValueError(f"border {border} too large for {H}x{W} frames")
    m = np.ones((F, 1, H, W), dtype=np.float32)
    m[:, :, bh:H - bh, bw:W - bw] = 0.0
    return m


def make_interpolation_mask(F, H, W, keyframes=None):
    """Keyframes kept (all 0); every other frame fully masked (all 1)."""
    if keyframes is None:
        keyframes = (0, F - 1)
    keys = sorted(set(int(k) for k in keyframes))
    if not keys:
        raise ValueError("interpolation needs at least one keyframe")
    if keys[0] < 0 or keys[-1] >= F:
        raise ValueError(f"keyframe indices {keys} outside [0, {F})")
    m = np.ones((F, 1, H, W), dtype=np.float32)
    m[keys] = 0.0
    return m


def sample_mixed(policy: MixedMaskPolicy, context, stream):
    """Draw a mask kind, build the mask and maybe drop the prompt.

    ``context`` is a mapping with ``frames``, ``height``, ``width``, the
    clip's ground-truth ``object_mask`` and its ``prompt`` token.

    Returns ``(mask, prompt_or_None, kind)``.
    """
    F, H, W = context["frames"], context["height"], context["width"]
    kind = KIND_ORDER[int(stream.choice(policy.probabilities))]
    if kind is MaskKind.OBJECT:
        seg = context.get("object_mask")
        if seg is None:
            raise ValueError("object masks need the clip's ground-truth footprint")
        mask = make_object_mask(seg, policy.object_dilation)
    elif kind is MaskKind.RANDOM:
        mask = make_random_mask(F, H, W, policy.coverage, stream)
    elif kind is MaskKind.MARGINAL:
        mask = make_marginal_mask(F, H, W)
    else:
        mask = make_interpolation_mask(F, H, W)
    drop = float(stream.uniform()) < policy.null_prompt_prob
    prompt = None if drop else context.get("prompt")
    return mask, prompt, kind


def resize_mask(m, out_h, out_w):
    """Per-frame bicubic (Catmull-Rom) resize, clamped to [0, 1]."""
    m = np.asarray(m)
    if out_h < 1 or out_w < 1:
        raise ValueError("target extents must be positive")
    H, W = m.shape[-2:]
    if (H, W) == (out_h, out_w):
        return m.astype(np.float32, copy=True)
    mh = cubic_matrix(H, out_h)
    mw = cubic_matrix(W, out_w)
    out = mh @ m.astype(np.float64) @ mw.T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def coverage(m):
    return float(np.mean(m))


def masked_frame_count(m):
    return int(np.sum(np.all(np.asarray(m) > 0, axis=(1, 2, 3))))


def is_frame_granular(m):
    per_frame = np.asarray(m).reshape(len(m), -1)
    return bool(np.all((per_frame.min(axis=1) == per_frame.max(axis=1))))


def interpolation_keyframes(text: str):
    """Parse ``"0,7"`` into a sorted tuple of ints."""
    try:
        keys = tuple(sorted({int(k) for k in text.split(",") if k.strip()}))
    except ValueError as exc:
        raise ValueError(f"bad keyframe list {spec!r}") from exc
    if not keys:
        raise ValueError("empty keyframe list")
    return keys
