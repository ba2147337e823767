"""Mixed-mask denoising training with prompt dropout and a two-stage schedule."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffusion import build_schedule, epsilon_loss, q_sample
from .maskgen import MixedMaskPolicy, resize_mask, sample_mixed
from .model import Denoiser, encode_latent, save_checkpoint
from .numerics import RandomStream, backward
from .synthdata import NULL_TOKEN

DEFAULT_LR = {1: 1e-4, 2: 1e-5}
LR_SCHEDULES = ("constant", "cosine")
LOG_COLUMNS = ("step", "stage", "loss", "mask_kind", "mean_abs_grad")


class NumericalFailure(FloatingPointError):
    """Raised when the loss stops being finite; carries step diagnostics."""

    def __init__(self, step, t_values, kinds, loss):
        hist = dict(Counter(kinds))
        super().__init__(f"non-finite loss {loss} at step {step}; t={list(map(int, t_values))}; mask kinds={hist}")
        self.step = step
        self.t_values = list(map(int, t_values))
        self.kind_histogram = hist


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    learning_rate: float | None = None
    steps: int = 500
    batch: int = 4
    policy: MixedMaskPolicy = field(default_factory=MixedMaskPolicy)
    omega_s_train: float = 1.0
    seed: int = 0
    timesteps: int = 1000
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    lr_schedule: str = "constant"
    warmup_steps: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", DEFAULT_LR[self.stage])
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    def lr_at(self, step):
        """Learning rate for the update with zero-based index ``step``.

        Linear warmup over ``warmup_steps``, then either flat or a half-cosine
        that reaches zero after ``steps`` updates.
        """
        lr = self.learning_rate
        if step < self.warmup_steps:
            lr *= (step + 1) / self.warmup_steps
        if self.lr_schedule == "cosine" and self.steps:
            lr *= 0.5 * (1.0 + math.cos(math.pi * min(step, self.steps) / self.steps))
        return lr


class Adam:
    """Adam with bias correction; weight decay is not used."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.lr:
                p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


def sample_timesteps(T, n, stream):
    """``n`` integer steps uniform on ``[1, T]``."""
    return stream.integers(1, T + 1, n)


def draw_conditioning(clip, policy, stream):
    """Mask, prompt token and mask kind for one training clip."""
    F, _, H, W = clip.video.shape
    context = {
        "frames": F,
        "height": H,
        "width": W,
        "object_mask": clip.object_mask,
        "prompt": clip.prompt.token_id,
    }
    mask, prompt, kind = sample_mixed(policy, context, stream)
    return mask, (NULL_TOKEN if prompt is None else int(prompt)), kind


@dataclass
class Batch:
    z_t: np.ndarray
    t: np.ndarray
    z0_masked: np.ndarray
    mask_resized: np.ndarray
    tokens: np.ndarray
    eps: np.ndarray
    kinds: list


def prepare_batch(clips, config: TrainConfig, schedule, stream):
    zs, z0ms, mrs, toks, kinds = [], [], [], [], []
    for j, clip in enumerate(clips):
        mask, token, kind = draw_conditioning(clip, config.policy, stream.spawn(f"cond{j}"))
        x0 = clip.video.astype(np.float32)
        zs.append(encode_latent(x0))
        z0ms.append(encode_latent(x0 * (1.0 - mask)))
        h, w = zs[-1].shape[-2:]
        mrs.append(resize_mask(mask, h, w))
        toks.append(token)
        kinds.append(kind.value)
    z0 = np.stack(zs)
    t = sample_timesteps(schedule.T, len(clips), stream.spawn("t"))
    eps = stream.spawn("eps").normal(z0.shape, np.float32)
    z_t = q_sample(z0, t, eps, schedule).astype(np.float32)
    return Batch(z_t, t, np.stack(z0ms), np.stack(mrs), np.array(toks), eps, kinds)


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    mean_abs_grad: float
    kinds: list
    t: np.ndarray


class Trainer:
    """Owns the optimizer state for one stage of training."""

    def __init__(self, model: Denoiser, clips, config: TrainConfig, schedule=None):
        if not clips:
            raise ValueError("training needs at least one clip")
        self.model = model
        self.clips = list(clips)
        self.config = config
        self.schedule = schedule or build_schedule(config.timesteps)
        self.named = model.stage_parameters(config.stage)
        self.params = [p for _, p in self.named]
        self.optimizer = Adam(self.params, config.learning_rate, config.betas, config.adam_eps)
        self.stream = RandomStream(config.seed, _path=("train", f"stage{config.stage}"))
        self.step_index = 0
        self.history = []

    def pick_clips(self, stream):
        idx = stream.integers(0, len(self.clips), self.config.batch)
        return [self.clips[int(i)] for i in idx]

    def step(self):
        s = self.stream.spawn(self.step_index)
        batch = prepare_batch(self.pick_clips(s.spawn("pick")), self.config, self.schedule, s.spawn("batch"))
        pred = self.model(
            batch.z_t, batch.t, batch.z0_masked, batch.mask_resized, batch.tokens, omega_s=self.config.omega_s_train
        )
        loss = epsilon_loss(batch.eps, pred)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalFailure(self.step_index, batch.t, batch.kinds, value)
        grads = backward(loss, self.params)
        total = sum(g.size for g in grads)
        mean_abs = sum(float(np.abs(g).sum()) for g in grads) / max(total, 1)
        grads, norm = clip_by_global_norm(grads, self.config.grad_clip)
        self.optimizer.lr = self.config.lr_at(self.step_index)
        self.optimizer.step(grads)
        self.step_index += 1
        res = StepResult(value, norm, mean_abs, batch.kinds, batch.t)
        self.history.append(res)
        return res

    def run(self, steps=None, log_path=None, checkpoint_dir=None, checkpoint_every=0, callback=None):
        steps = self.config.steps if steps is None else steps
        writer = fh = None
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            fh = open(log_path, "a", newline="")
            writer = csv.writer(fh)
            if fh.tell() == 0:
                writer.writerow(LOG_COLUMNS)
        try:
            for _ in range(steps):
                res = self.step()
                if writer is not None:
                    writer.writerow(
                        [self.step_index, self.config.stage, repr(res.loss), "|".join(res.kinds), repr(res.mean_abs_grad)]
                    )
                if checkpoint_dir and checkpoint_every and self.step_index % checkpoint_every == 0:
                    save_checkpoint(self.model, Path(checkpoint_dir) / f"step_{self.step_index:06d}", self.config.stage)
                if callback is not None:
                    callback(self, res)
        finally:
            if fh is not None:
                fh.close()
        self.model.stage = self.config.stage
        return [r.loss for r in self.history]


def train_step(model, clips, config: TrainConfig, stream, optimizer=None, schedule=None):
    """One update on an explicit batch of clips; returns the batch loss.

    Without an ``optimizer`` a fresh Adam over the stage's parameters is used,
    which makes this a self-contained single step.
    """
    schedule = schedule or build_schedule(config.timesteps)
    params = [p for _, p in model.stage_parameters(config.stage)]
    optimizer = optimizer or Adam(params, config.learning_rate, config.betas, config.adam_eps)
    batch = prepare_batch(clips, config, schedule, stream)
    pred = model(batch.z_t, batch.t, batch.z0_masked, batch.mask_resized, batch.tokens, omega_s=config.omega_s_train)
    loss = epsilon_loss(batch.eps, pred)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericalFailure(0, batch.t, batch.kinds, value)
    grads, _ = clip_by_global_norm(backward(loss, optimizer.params), config.grad_clip)
    optimizer.step(grads)
    return value


def run_two_stage(model, clips, stage1: TrainConfig, stage2: TrainConfig, log_path=None, checkpoint_dir=None):
    """Stage 1 trains everything; stage 2 only the temporal/expert/gate/tap parameters.

    Returns ``(model, stage1_losses, stage2_losses)``.
    """
    if stage1.stage != 1 or stage2.stage != 2:
        raise ValueError("expected a stage-1 config followed by a stage-2 config")
    schedule = build_schedule(stage1.timesteps)
    first = Trainer(model, clips, stage1, schedule).run(log_path=log_path)
    if checkpoint_dir:
        save_checkpoint(model, Path(checkpoint_dir) / "stage1", 1)
    second = Trainer(model, clips, replace(stage2, timesteps=stage1.timesteps), schedule).run(log_path=log_path)
    if checkpoint_dir:
        save_checkpoint(model, Path(checkpoint_dir) / "stage2", 2)
    return model, first, second
