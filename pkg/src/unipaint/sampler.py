"""DDIM sampling with classifier-free guidance and the three task wrappers."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import build_schedule
from .maskgen import make_interpolation_mask, make_marginal_mask
from .model import decode_latent, encode_latent, make_bundle
from .numerics import no_grad
from .synthdata import NULL_TOKEN, ScenePrompt

FULL_SCALE_STEPS = 100
DESK_SCALE_STEPS = 20
DEFAULT_CFG_SCALE = 12.5


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = DESK_SCALE_STEPS
    cfg_scale: float = DEFAULT_CFG_SCALE
    omega_s: float = 1.0
    eta: float = 0.0
    final_composite: bool = True
    latent_blend: bool = False
    # the codec is a pixel rearrangement, so clean latents live in [-1, 1]
    clip_x0: float | None = 1.0

    def validate(self, schedule):
        if not 1 <= self.steps <= schedule.T:
            raise ValueError(f"steps must lie in [1, {schedule.T}], got {self.steps}")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be non-negative")
        if self.omega_s < 0:
            raise ValueError("omega_s must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.clip_x0 is not None and not self.clip_x0 > 0:
            raise ValueError("clip_x0 must be positive or None")


def timestep_ladder(T, steps):
    """Evenly strided integers from ``T`` down to 0, strictly decreasing."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}]")
    return np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)


def ddim_step(z_t, eps_hat, t, t_prev, schedule, eta=0.0, stream=None, clip_x0=None):
    """One DDIM update from ``t`` to ``t_prev`` (``abar(0) = 1``).

    With ``clip_x0`` set, the clean-signal estimate is clamped to
    ``[-clip_x0, clip_x0]`` before re-noising. Near ``t = T`` that estimate
    divides the noise error by ``sqrt(abar_t)``, and without the clamp a few
    early steps can push the trajectory far outside the data range.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = float(schedule.abar(t))
    ab_p = float(schedule.abar(t_prev))
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if clip_x0 is not None:
        x0 = np.clip(x0, -clip_x0, clip_x0)
    sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
    out = np.sqrt(ab_p) * x0 + np.sqrt(max(1.0 - ab_p - sigma * sigma, 0.0)) * eps_hat
    if sigma > 0:
        if stream is None:
            raise ValueError("a random stream is required when eta > 0")
        out = out + sigma * stream.normal(np.shape(z_t), np.asarray(z_t).dtype)
    return out.astype(np.asarray(z_t).dtype, copy=False)


def _token(prompt):
    if prompt is None:
        return NULL_TOKEN
    if isinstance(prompt, ScenePrompt):
        return prompt.token_id
    return int(prompt)


def _denoise(model, z_t, t, bundle, token, omega_s):
    z0m, mr = bundle
    with no_grad():
        out = model(z_t[None], [t], z0m[None], mr[None], [token], omega_s=omega_s)
    return out.data[0]


def guided_eps(model, z_t, t, bundle, prompt, cfg_scale, omega_s=1.0, null_prompt=NULL_TOKEN):
    """``eps_null + cfg_scale * (eps_cond - eps_null)`` for one unbatched latent.

    Scale 1 returns the conditional prediction and scale 0 (or a null prompt)
    the unconditional one, without the round-off of the general formula.
    """
    if cfg_scale < 0:
        raise ValueError("cfg_scale must be non-negative")
    token = _token(prompt)
    if token == null_prompt or cfg_scale == 0:
        return _denoise(model, z_t, t, bundle, null_prompt, omega_s)
    cond = _denoise(model, z_t, t, bundle, token, omega_s)
    if cfg_scale == 1:
        return cond
    null = _denoise(model, z_t, t, bundle, null_prompt, omega_s)
    return null + cfg_scale * (cond - null)


def _latent_mask(mask):
    # a latent cell counts as known only if all four source pixels are known
    F, _, H, W = mask.shape
    return mask.reshape(F, 1, H // 2, 2, W // 2, 2).max(axis=(3, 5))


def sample_inpaint(model, source, mask, prompt, cfg: SamplerConfig, stream, schedule=None):
    """Fill the masked region of ``source`` ``[F, C, H, W]``; returns the same shape."""
    schedule = schedule or build_schedule()
    cfg.validate(schedule)
    source = np.asarray(source, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != (source.shape[0], 1) + source.shape[2:]:
        raise ValueError(f"mask shape {mask.shape} does not match source {source.shape}")
    if source.shape[1] != model.config.image_channels:
        raise ValueError(f"model expects {model.config.image_channels} channels, got {source.shape[1]}")
    bundle = make_bundle(source, mask)
    dtype = model.dtype
    bundle = (bundle[0].astype(dtype), bundle[1].astype(dtype))
    z = stream.spawn("init").normal(bundle[0].shape, dtype)
    known = encode_latent(source).astype(dtype) if cfg.latent_blend else None
    keep = (1.0 - _latent_mask(mask)).astype(dtype) if cfg.latent_blend else None
    ladder = timestep_ladder(schedule.T, cfg.steps)
    for i, (t, t_prev) in enumerate(zip(ladder[:-1], ladder[1:])):
        eps = guided_eps(model, z, int(t), bundle, prompt, cfg.cfg_scale, cfg.omega_s)
        z = ddim_step(z, eps, int(t), int(t_prev), schedule, cfg.eta, stream.spawn(f"step{i}"), cfg.clip_x0)
        if cfg.latent_blend:
            ab = float(schedule.abar(int(t_prev)))
            noise = stream.spawn(f"blend{i}").normal(z.shape, dtype)
            noisy_known = np.sqrt(ab) * known + np.sqrt(1.0 - ab) * noise
            z = keep * noisy_known + (1.0 - keep) * z
    video = np.clip(decode_latent(z), -1.0, 1.0).astype(np.float32)
    if cfg.final_composite:
        video = np.where(mask > 0, video, source)
    return video


def sample_outpaint(model, source, border, prompt, cfg: SamplerConfig, stream, schedule=None):
    """Synthesize a border of width ``border`` on a canvas already padded by the caller."""
    F, _, H, W = np.shape(source)
    mask = make_marginal_mask(F, H, W, border)
    return sample_inpaint(model, source, mask, prompt, cfg, stream, schedule)


def sample_interpolate(model, video, keyframes, prompt, cfg: SamplerConfig, stream, schedule=None):
    """Regenerate every frame not listed in ``keyframes``."""
    F, _, H, W = np.shape(video)
    mask = make_interpolation_mask(F, H, W, keyframes)
    return sample_inpaint(model, video, mask, prompt, cfg, stream, schedule)


def to_uint8(frame):
    """``[C, H, W]`` in [-1, 1] to ``[H, W, 3]`` bytes (grey replicated)."""
    x = np.clip((np.asarray(frame, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    x = np.round(x).astype(np.uint8).transpose(1, 2, 0)
    if x.shape[2] == 1:
        x = np.repeat(x, 3, axis=2)
    return x


def write_ppm_frames(video, directory, prefix="frame"):
    """One binary P6 file per frame; returns the written paths."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for f, frame in enumerate(np.asarray(video)):
        px = to_uint8(frame)
        h, w = px.shape[:2]
        path = root / f"{prefix}_{f:04d}.ppm"
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())
        paths.append(path)
    return paths


def read_ppm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
