"""Evaluation metrics for edited videos ``[F, C, H, W]`` in [-1, 1]."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PIXEL_RANGE = 2.0
ALIGN_RADIUS = 0.5
TC_GRID = 8


class UndefinedMetric(ValueError):
    """The metric has no value for these inputs (e.g. empty region)."""


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def bp_l1(original, edited, mask):
    """Mean absolute difference over the unmasked region (mask == 0)."""
    a, b = _same_shape(original, edited)
    keep = np.broadcast_to(np.asarray(mask) == 0, a.shape)
    if not keep.any():
        raise UndefinedMetric("background preservation is undefined for an all-one mask")
    return float(np.abs(a - b)[keep].mean())


def psnr(reference, candidate, max_val=PIXEL_RANGE):
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a, b = _same_shape(reference, candidate)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def ssim(reference, candidate, window=7, k1=0.01, k2=0.03, data_range=PIXEL_RANGE):
    """Mean SSIM over valid uniform windows, per frame and channel."""
    a, b = _same_shape(reference, candidate)
    if a.ndim < 2 or min(a.shape[-2:]) < window:
        raise ValueError(f"spatial extents {a.shape[-2:]} smaller than the {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _area_downsample(frame, size):
    H, W = frame.shape
    if H % size or W % size:
        raise ValueError(f"frame {H}x{W} is not divisible into a {size}x{size} grid")
    return frame.reshape(size, H // size, size, W // size).mean(axis=(1, 3))


def proxy_features(video, size=TC_GRID):
    """Mean-centred ``size*size`` grey thumbnails, one row per frame."""
    v = np.asarray(video, dtype=np.float64)
    grey = v.mean(axis=1)
    feats = np.stack([_area_downsample(f, size).reshape(-1) for f in grey])
    return feats - feats.mean(axis=1, keepdims=True)


@dataclass
class ConsistencyResult:
    value: float
    skipped: int


def temporal_consistency(video, size=TC_GRID, tol=1e-12):
    """Mean cosine similarity of consecutive proxy features.

    Pairs involving a zero-variance frame are skipped and counted; if every
    pair is skipped the value is ``nan``.
    """
    v = np.asarray(video)
    if v.shape[0] < 2:
        raise ValueError("temporal consistency needs at least two frames")
    feats = proxy_features(v, size)
    norms = np.linalg.norm(feats, axis=1)
    sims, skipped = [], 0
    for f in range(len(feats) - 1):
        if norms[f] <= tol or norms[f + 1] <= tol:
            skipped += 1
            continue
        sims.append(float(feats[f] @ feats[f + 1] / (norms[f] * norms[f + 1])))
    return ConsistencyResult(float(np.mean(sims)) if sims else math.nan, skipped)


def prompt_alignment(edited, mask, prompt, radius=ALIGN_RADIUS):
    """Fraction of masked pixels within ``radius`` of the prompt's colour."""
    if prompt is None:
        raise ValueError("prompt alignment needs a non-null prompt")
    v = np.asarray(edited, dtype=np.float64)
    sel = np.asarray(mask)[:, 0] > 0
    if not sel.any():
        raise UndefinedMetric("prompt alignment is undefined for an empty mask")
    pixels = v.transpose(0, 2, 3, 1)[sel]
    dist = np.linalg.norm(pixels - np.asarray(prompt.canonical_color, dtype=np.float64), axis=1)
    return float(np.mean(dist <= radius))


def nearest_keyframe_index(F, keyframes):
    keys = sorted(set(int(k) for k in keyframes))
    if not keys:
        raise ValueError("need at least one keyframe")
    if keys[0] < 0 or keys[-1] >= F:
        raise ValueError(f"keyframes {keys} outside [0, {F})")
    # ties go to the earlier keyframe because min() keeps the first minimum
    return [min(keys, key=lambda k: abs(k - f)) for f in range(F)]


def copy_keyframe_baseline(video, keyframes):
    v = np.asarray(video)
    return v[nearest_keyframe_index(len(v), keyframes)].copy()


def _json_number(x):
    if x is None:
        return None
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass
class EvalReport:
    bp_l1: float
    psnr_db: float
    ssim: float
    tc: float
    align: float
    tc_skipped: int = 0
    notes: dict = field(default_factory=dict)

    def to_json(self):
        d = asdict(self)
        for k in ("bp_l1", "psnr_db", "ssim", "tc", "align"):
            d[k] = _json_number(d[k])
        return json.dumps(d, indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        for k in ("bp_l1", "psnr_db", "ssim", "tc", "align"):
            if isinstance(d[k], str):
                d[k] = float(d[k])
        return cls(**d)


def evaluate(reference, candidate, mask, prompt=None):
    """All five metrics; undefined entries become ``nan``/``inf`` with a note."""
    notes = {}
    ref = np.asarray(reference)
    cand = np.asarray(candidate)
    mask = np.asarray(mask)
    try:
        bp = bp_l1(ref, cand, mask)
    except UndefinedMetric as exc:
        bp, notes["bp_l1"] = math.nan, str(exc)
    ps = psnr(ref, cand)
    if math.isinf(ps):
        notes["psnr_db"] = "identical inputs"
    ss = ssim(ref, cand)
    tc = temporal_consistency(cand)
    if tc.skipped:
        notes["tc"] = f"{tc.skipped} frame pair(s) skipped for zero variance"
    if prompt is None:
        al, notes["align"] = math.nan, "no prompt given"
    else:
        try:
            al = prompt_alignment(cand, mask, prompt)
        except UndefinedMetric as exc:
            al, notes["align"] = math.nan, str(exc)
    return EvalReport(bp, ps, ss, tc.value, al, tc.skipped, notes)
