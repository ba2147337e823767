"""The video denoiser: base U-Net, mask-gated expert mixture and adapter branch.

Public arrays follow the per-frame channels-first convention
``[B, F, C, h, w]``; the network itself runs channels-last.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .numerics import RandomStream
from .numerics import tensor as T
from .numerics.tensor import Tensor, as_tensor
from .numerics.uptn import read_tensor, write_tensor
from .synthdata import NULL_TOKEN, VOCAB_SIZE

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# latent codec
# ---------------------------------------------------------------------------

def encode_latent(x):
    """Space-to-depth by 2: ``[..., C, H, W] -> [..., 4C, H/2, W/2]``.

    Output channel ``c*4 + dy*2 + dx`` holds input pixel ``(2i+dy, 2j+dx)``
    of channel ``c``.
    """
    x = np.asarray(x)
    *lead, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"frame extents must be even, got {H}x{W}")
    y = x.reshape(*lead, C, H // 2, 2, W // 2, 2)
    n = len(lead)
    y = y.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return np.ascontiguousarray(y.reshape(*lead, 4 * C, H // 2, W // 2))


def decode_latent(z):
    z = np.asarray(z)
    *lead, C4, h, w = z.shape
    if C4 % 4:
        raise ValueError(f"latent channel count {C4} is not a multiple of 4")
    n = len(lead)
    y = z.reshape(*lead, C4 // 4, 2, 2, h, w)
    y = y.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return np.ascontiguousarray(y.reshape(*lead, C4 // 4, 2 * h, 2 * w))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    image_channels: int = 3
    widths: tuple = (32, 64)
    n_experts: int = 4
    ffn_mult: int = 4
    head_dim: int = 16
    gate_width: int = 8
    gate_layers: int = 3
    vocab_size: int = VOCAB_SIZE
    embed_dim: int | None = None
    injection_sites: tuple = ("enc0", "enc1", "mid")
    zero_init_taps: bool = True
    zero_init_gate: bool = True
    zero_init_output: bool = True
    # spatial self-attention at every resolution, or only at the bottleneck
    spatial_attn_every_level: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "injection_sites", tuple(self.injection_sites))
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.n_experts < 1 or self.gate_layers < 1:
            raise ValueError("need at least one expert and one gate layer")
        valid = self.valid_sites()
        bad = [s for s in self.injection_sites if s not in valid]
        if bad:
            raise ValueError(f"unknown injection sites {bad}; valid sites are {valid}")
        if len(set(self.injection_sites)) != len(self.injection_sites):
            raise ValueError("duplicate injection sites")

    @property
    def latent_channels(self):
        return 4 * self.image_channels

    @property
    def context_dim(self):
        return self.embed_dim or self.widths[0]

    @property
    def time_dim(self):
        return 4 * self.widths[0]

    def valid_sites(self):
        n = len(self.widths)
        return tuple(f"enc{i}" for i in range(n)) + ("mid",) + tuple(f"dec{i}" for i in range(n))

    def site_width(self, site):
        return self.widths[-1] if site == "mid" else self.widths[int(site[3:])]

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        for k in ("widths", "injection_sites"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class MoETemporalBlock(L.Module):
    """Two temporal self-attentions, prompt cross-attention, then an expert mixture."""

    def __init__(self, dim, ctx_dim, n_experts, hidden, head_dim, stream):
        self.norm_t1 = L.LayerNorm(dim)
        self.attn_t1 = L.Attention(dim, stream.spawn("t1"), head_dim=head_dim)
        self.norm_t2 = L.LayerNorm(dim)
        self.attn_t2 = L.Attention(dim, stream.spawn("t2"), head_dim=head_dim)
        self.norm_x = L.LayerNorm(dim)
        self.attn_x = L.Attention(dim, stream.spawn("x"), ctx_dim=ctx_dim, head_dim=head_dim)
        self.norm_ff = L.LayerNorm(dim)
        self.experts = [L.FeedForward(dim, hidden, stream.spawn(f"expert{i}")) for i in range(n_experts)]
        self._dim = dim

    def __call__(self, x, context, weights, expert_ids=None):
        """``x`` ``[B, F, H, W, C]``, ``context`` ``[B, Lc, D]``, ``weights`` ``[B, n]``.

        ``expert_ids`` restricts the mixture to a subset of experts (with
        ``weights`` given for that subset only).
        """
        x = as_tensor(x)
        B, F, H, W, C = x.shape
        if C != self._dim:
            raise ValueError(f"feature width {C} does not match expert width {self._dim}")
        ids = range(len(self.experts)) if expert_ids is None else list(expert_ids)
        weights = as_tensor(weights, x.dtype)
        if weights.shape != (B, len(ids)):
            raise ValueError(f"expert weights must be [{B}, {len(ids)}], got {weights.shape}")
        pos = L.sinusoid(np.arange(F), C).astype(x.dtype)
        seq = x.transpose(0, 2, 3, 1, 4).reshape(B * H * W, F, C)
        seq = seq + self.attn_t1(self.norm_t1(seq) + pos)
        seq = seq + self.attn_t2(self.norm_t2(seq) + pos)
        tok = seq.reshape(B, H * W * F, C)
        tok = tok + self.attn_x(self.norm_x(tok), context)
        y = self.norm_ff(tok)
        mix = None
        for j, i in enumerate(ids):
            term = self.experts[i](y) * weights[:, j].reshape(B, 1, 1)
            mix = term if mix is None else mix + term
        tok = tok + mix
        return tok.reshape(B, H, W, F, C).transpose(0, 3, 1, 2, 4)


class MaskGate(L.Module):
    """Stride-2 3D convolutions over the mask, global pooling, linear, softmax."""

    def __init__(self, cfg: ModelConfig, stream):
        chans = [1] + [cfg.gate_width] * cfg.gate_layers
        self.convs = [L.Conv3d(a, b, stream.spawn(f"conv{i}"), stride=2) for i, (a, b) in enumerate(zip(chans, chans[1:]))]
        self.proj = L.Linear(cfg.gate_width, cfg.n_experts, stream.spawn("proj"), zero=cfg.zero_init_gate)

    def __call__(self, mask):
        """``mask`` ``[B, F, h, w, 1]`` -> weights ``[B, n]``."""
        h = as_tensor(mask)
        for conv in self.convs:
            h = T.silu(conv(h))
        pooled = h.mean(axis=(1, 2, 3))
        return T.softmax(self.proj(pooled), axis=-1)


class BaseUNet(L.Module):
    def __init__(self, cfg: ModelConfig, stream):
        w = cfg.widths
        td, cd = cfg.time_dim, cfg.context_dim
        self.time_fc1 = L.Linear(w[0], td, stream.spawn("time1"))
        self.time_fc2 = L.Linear(td, td, stream.spawn("time2"))
        self.conv_in = L.Conv2d(cfg.latent_channels, w[0], stream.spawn("conv_in"))
        every = cfg.spatial_attn_every_level
        self.enc_res, self.enc_attn, self.enc_moe, self.down = [], [], [], []
        c = w[0]
        for i, wi in enumerate(w):
            s = stream.spawn(f"enc{i}")
            self.enc_res.append(L.ResBlock(c, wi, td, s.spawn("res")))
            if every:
                self.enc_attn.append(L.SpatialAttention(wi, s.spawn("attn")))
            self.enc_moe.append(MoETemporalBlock(wi, cd, cfg.n_experts, cfg.ffn_mult * wi, cfg.head_dim, s.spawn("moe")))
            c = wi
            if i < len(w) - 1:
                self.down.append(L.Conv2d(wi, wi, s.spawn("down"), stride=2))
        self.mid_res = L.ResBlock(c, c, td, stream.spawn("mid_res"))
        self.mid_attn = L.SpatialAttention(c, stream.spawn("mid_attn"))
        self.dec_res, self.dec_attn, self.dec_moe, self.up = [], [], [], []
        for i in reversed(range(len(w))):
            s = stream.spawn(f"dec{i}")
            self.dec_res.append(L.ResBlock(c + w[i], w[i], td, s.spawn("res")))
            if every:
                self.dec_attn.append(L.SpatialAttention(w[i], s.spawn("attn")))
            self.dec_moe.append(MoETemporalBlock(w[i], cd, cfg.n_experts, cfg.ffn_mult * w[i], cfg.head_dim, s.spawn("moe")))
            c = w[i]
            if i > 0:
                self.up.append(L.Conv2d(c, c, s.spawn("up")))
        self.norm_out = L.LayerNorm(w[0])
        self.conv_out = L.Conv2d(w[0], cfg.latent_channels, stream.spawn("conv_out"), zero=cfg.zero_init_output)
        self._cfg = cfg

    def time_embedding(self, t, dtype):
        feats = L.sinusoid(t, self._cfg.widths[0]).astype(dtype)
        return self.time_fc2(T.silu(self.time_fc1(feats)))

    def __call__(self, z, temb, context, weights, inject, expert_ids=None):
        """``inject(site, h)`` returns the (possibly) modified activation."""
        n = len(self._cfg.widths)
        h = self.conv_in(z)
        skips = []
        for i in range(n):
            h = self.enc_res[i](h, temb)
            h = inject(f"enc{i}", h)
            if self.enc_attn:
                h = self.enc_attn[i](h)
            h = self.enc_moe[i](h, context, weights, expert_ids)
            skips.append(h)
            if i < n - 1:
                h = self.down[i](h)
        h = self.mid_res(h, temb)
        h = self.mid_attn(h)
        h = inject("mid", h)
        for j, i in enumerate(reversed(range(n))):
            h = T.concat([h, skips[i]], axis=-1)
            h = self.dec_res[j](h, temb)
            h = inject(f"dec{i}", h)
            if self.dec_attn:
                h = self.dec_attn[j](h)
            h = self.dec_moe[j](h, context, weights, expert_ids)
            if i > 0:
                h = self.up[j](T.upsample_nearest(h, 2))
        return self.conv_out(T.silu(self.norm_out(h)))


class AdapterBranch(L.Module):
    """Encoder-shaped branch over ``[z_t, z0_masked, mask]`` with one tap per injection site."""

    def __init__(self, cfg: ModelConfig, stream):
        w = cfg.widths
        td = cfg.time_dim
        self.conv_in = L.Conv2d(2 * cfg.latent_channels + 1, w[0], stream.spawn("conv_in"))
        self.prompt_proj = L.Linear(cfg.context_dim, w[0], stream.spawn("prompt"))
        self.res, self.down = [], []
        c = w[0]
        for i, wi in enumerate(w):
            self.res.append(L.ResBlock(c, wi, td, stream.spawn(f"res{i}")))
            c = wi
            if i < len(w) - 1:
                self.down.append(L.Conv2d(wi, wi, stream.spawn(f"down{i}"), stride=2))
        self.mid_res = L.ResBlock(c, c, td, stream.spawn("mid_res"))
        self.taps = [
            L.Linear(cfg.site_width(s), cfg.site_width(s), stream.spawn(f"tap_{s}"), zero=cfg.zero_init_taps)
            for s in cfg.injection_sites
        ]
        self._sites = cfg.injection_sites
        self._n = len(w)

    def __call__(self, bundle_in, temb, prompt_vec):
        """Returns ``{site: feature}`` for every configured injection site."""
        B = bundle_in.shape[0]
        h = self.conv_in(bundle_in) + self.prompt_proj(prompt_vec).reshape(B, 1, 1, 1, -1)
        trunk = {}
        for i in range(self._n):
            h = self.res[i](h, temb)
            trunk[f"enc{i}"] = trunk[f"dec{i}"] = h
            if i < self._n - 1:
                h = self.down[i](h)
        trunk["mid"] = self.mid_res(h, temb)
        return {s: tap(trunk[s]) for s, tap in zip(self._sites, self.taps)}


def inject(base_feature, adapter_feature, omega_s):
    """Feature insertion ``h + omega_s * a``."""
    return base_feature + adapter_feature * omega_s


# ---------------------------------------------------------------------------
# the full model
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Intermediate values recorded by :meth:`Denoiser.forward` on request."""

    weights: object = None
    adapter: dict = field(default_factory=dict)
    base: dict = field(default_factory=dict)
    injected: dict = field(default_factory=dict)


class Denoiser(L.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        stream = RandomStream(cfg.seed, _path=("model",))
        self.embed = Tensor(stream.spawn("embed").normal((cfg.vocab_size, cfg.context_dim)).astype(np.float32), requires_grad=True)
        self.base = BaseUNet(cfg, stream.spawn("base"))
        self.gate = MaskGate(cfg, stream.spawn("gate"))
        self.adapter = AdapterBranch(cfg, stream.spawn("adapter"))
        self.config = cfg
        self.stage = 0

    @property
    def dtype(self):
        return self.embed.data.dtype

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    # -- stage-2 trainable set ---------------------------------------------
    def stage_parameters(self, stage):
        """Named parameters updated in the given training stage."""
        named = list(self.named_parameters())
        if stage == 1:
            return named
        if stage != 2:
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        keep = ("base.enc_moe.", "base.dec_moe.", "gate.", "adapter.taps.")
        return [(n, p) for n, p in named if n.startswith(keep)]

    # -- forward -------------------------------------------------------------
    def prompt_context(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError(f"prompt tokens must lie in [0, {self.config.vocab_size})")
        return T.embedding(self.embed, tokens)  # [B, D]

    def expert_weights(self, mask_cl):
        return self.gate(mask_cl)

    def forward(self, z_t, t, z0_masked, mask_resized, tokens, omega_s=1.0, gate_override=None,
                expert_ids=None, trace: ForwardTrace | None = None):
        """Predict the noise for a batch.

        ``z_t``, ``z0_masked``: ``[B, F, C_lat, h, w]``; ``mask_resized``:
        ``[B, F, 1, h, w]``; ``t``: ``[B]`` ints; ``tokens``: ``[B]`` ints with
        0 for the null prompt. Returns a tensor shaped like ``z_t``.
        """
        if omega_s < 0:
            raise ValueError("omega_s must be non-negative")
        dt = self.dtype
        z_t = as_tensor(z_t, dt)
        B, F, C, h, w = z_t.shape
        if C != self.config.latent_channels:
            raise ValueError(f"expected {self.config.latent_channels} latent channels, got {C}")
        n_levels = len(self.config.widths)
        if h % 2 ** (n_levels - 1) or w % 2 ** (n_levels - 1):
            raise ValueError(f"latent extents {h}x{w} not divisible by {2 ** (n_levels - 1)}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        tokens = np.broadcast_to(np.asarray(tokens, dtype=np.int64), (B,))

        zc = z_t.transpose(0, 1, 3, 4, 2)
        mc = np.asarray(mask_resized, dtype=dt).transpose(0, 1, 3, 4, 2)
        temb = self.base.time_embedding(t, dt)
        prompt_vec = self.prompt_context(tokens)
        context = prompt_vec.reshape(B, 1, -1)

        if gate_override is not None:
            weights = as_tensor(np.broadcast_to(np.asarray(gate_override, dtype=dt), (B, len(expert_ids or self.base.enc_moe[0].experts))).copy())
        else:
            weights = self.expert_weights(mc)
            if expert_ids is not None:
                raise ValueError("expert_ids requires an explicit gate_override")

        feats = {}
        if omega_s != 0 and self.config.injection_sites:
            z0c = as_tensor(z0_masked, dt).transpose(0, 1, 3, 4, 2)
            bundle = T.concat([zc, z0c, as_tensor(mc)], axis=-1)
            feats = self.adapter(bundle, temb, prompt_vec)

        if trace is not None:
            trace.weights = weights
            trace.adapter = feats

        def site_hook(site, hval):
            out = inject(hval, feats[site], omega_s) if site in feats else hval
            if trace is not None:
                trace.base[site] = hval
                trace.injected[site] = out
            return out

        out = self.base(zc, temb, context, weights, site_hook, expert_ids)
        return out.transpose(0, 1, 4, 2, 3)

    __call__ = forward


def make_bundle(source, mask, latent_hw=None):
    """Latent-space conditioning for a pixel video ``[F, C, H, W]`` (or batched).

    Returns ``(z0_masked, mask_resized)``.
    """
    from .maskgen import resize_mask

    source = np.asarray(source, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    z0m = encode_latent(source * (1.0 - mask))
    H, W = source.shape[-2:]
    lh, lw = latent_hw or (H // 2, W // 2)
    if mask.ndim == 5:
        mr = np.stack([resize_mask(m, lh, lw) for m in mask])
    else:
        mr = resize_mask(mask, lh, lw)
    return z0m, mr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _param_file(name):
    return name.replace("/", "_") + ".uptn"


def save_checkpoint(model: Denoiser, directory, stage=None, extra=None):
    root = Path(directory)
    (root / "params").mkdir(parents=True, exist_ok=True)
    stage = model.stage if stage is None else stage
    entries = []
    for name, p in model.named_parameters():
        write_tensor(root / "params" / _param_file(name), p.data)
        entries.append({"name": name, "shape": list(p.shape), "file": _param_file(name)})
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_json(),
        "stage": stage,
        "dtype": str(model.dtype),
        "parameters": entries,
    }
    if extra:
        manifest["extra"] = extra
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_checkpoint(directory) -> Denoiser:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    model = Denoiser(ModelConfig.from_json(manifest["config"]))
    state = {}
    for e in manifest["parameters"]:
        arr = read_tensor(root / "params" / e["file"])
        if list(arr.shape) != e["shape"]:
            raise ValueError(f"{e['file']}: shape {arr.shape} disagrees with manifest {e['shape']}")
        state[e["name"]] = arr
    model.astype(np.dtype(manifest.get("dtype", "float32")))
    model.load_state_dict(state)
    model.stage = manifest.get("stage", 0)
    return model


__all__ = [
    "NULL_TOKEN",
    "Denoiser",
    "ForwardTrace",
    "ModelConfig",
    "decode_latent",
    "encode_latent",
    "inject",
    "load_checkpoint",
    "make_bundle",
    "save_checkpoint",
]
