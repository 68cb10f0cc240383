"""Conditioning pipeline and the small transformer velocity network.

The condition (L, C) is widened with a replicate-padded temporal context
window, then an adapter compresses it to one token per frame. The velocity
network treats frames as tokens and reads the condition only through
cross-attention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from progdistill.errors import ConfigError, NumericDivergence, ShapeError

DOWNSAMPLE = 4


@dataclass(frozen=True)
class ContextConfig:
    k: int = 5

    def __post_init__(self):
        if not isinstance(self.k, int) or self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"context length k must be an odd positive integer, got {self.k!r}")


@dataclass(frozen=True)
class NetConfig:
    hidden: int = 64
    blocks: int = 2
    heads: int = 2
    time_embed_dim: int = 32
    context: int = 5

    def __post_init__(self):
        if self.hidden < 1 or self.blocks < 0 or self.heads < 1:
            raise ConfigError("hidden, heads must be >= 1 and blocks >= 0")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be an even integer >= 2")
        ContextConfig(self.context)

    def to_dict(self):
        return asdict(self)


def build_context(a: torch.Tensor, cfg: ContextConfig | int) -> torch.Tensor:
    """(..., L, C) -> (..., L, k*C); row i concatenates rows i-k//2 .. i+k//2."""
    k = cfg.k if isinstance(cfg, ContextConfig) else ContextConfig(cfg).k
    L = a.shape[-2]
    half = k // 2
    offsets = torch.arange(-half, half + 1)
    idx = (torch.arange(L)[:, None] + offsets[None, :]).clamp(0, L - 1)  # (L, k)
    windows = a[..., idx, :]  # (..., L, k, C)
    return windows.reshape(*a.shape[:-2], L, k * a.shape[-1])


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=x.dtype, device=x.device) / half
    )
    args = x[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _mlp(d_in, d_hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.SiLU(), nn.Linear(d_hidden, d_out))


class Adapter(nn.Module):
    """Context window (B, L, k*C) -> one token per frame (B, F, H).

    The first position is encoded on its own; positions 2..L are average
    pooled in windows of four (the last window is one short) and encoded
    separately. The first-position code is broadcast over frames,
    concatenated channel-wise with the pooled codes, and mapped to width H.
    """

    def __init__(self, in_dim: int, frames: int, hidden: int):
        super().__init__()
        self.frames = frames
        self.first = _mlp(in_dim, hidden, hidden)
        self.rest = _mlp(in_dim, hidden, hidden)
        self.final = _mlp(2 * hidden, hidden, hidden)

    def downsample(self, a: torch.Tensor) -> torch.Tensor:
        # a: (B, L-1, d) -> (B, F, d); window j covers positions 4j+1 .. 4j+4 of the original
        B, n, d = a.shape
        pad = DOWNSAMPLE * self.frames - n
        padded = F.pad(a, (0, 0, 0, pad))
        counts = torch.full((self.frames,), float(DOWNSAMPLE), dtype=a.dtype, device=a.device)
        counts[-1] -= pad
        return padded.reshape(B, self.frames, DOWNSAMPLE, d).sum(2) / counts[:, None]

    def forward(self, a_ctx: torch.Tensor) -> torch.Tensor:
        if a_ctx.shape[-2] != DOWNSAMPLE * self.frames:
            raise ShapeError(
                f"condition length {a_ctx.shape[-2]} != {DOWNSAMPLE} x frames ({self.frames})"
            )
        first = self.first(a_ctx[:, :1])  # (B, 1, H)
        rest = self.rest(self.downsample(a_ctx[:, 1:]))  # (B, F, H)
        both = torch.cat([first.expand_as(rest), rest], dim=-1)
        return self.final(both)


def adapt(a_ctx: torch.Tensor, adapter: Adapter) -> torch.Tensor:
    tokens = adapter(a_ctx)
    if not torch.isfinite(tokens).all():
        raise NumericDivergence("non-finite condition tokens")
    return tokens


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context):
        B, N, H = x.shape
        M = context.shape[1]
        q = self.q(x).view(B, N, self.heads, -1).transpose(1, 2)
        k, v = self.kv(context).view(B, M, 2, self.heads, -1).permute(2, 0, 3, 1, 4)
        o = F.scaled_dot_product_attention(q, k, v)
        return self.out(o.transpose(1, 2).reshape(B, N, H))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, cond_tokens):
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), cond_tokens)
        return x + self.ff(self.norm3(x))


class VelocityNet(nn.Module):
    """Velocity field ``v(z, t, cond)`` over (B, F, D) frame sequences.

    ``cond`` is the raw condition (B, L, C); ``None`` selects the learned
    unconditional tokens. ``drop_mask`` (B,) swaps the unconditional tokens
    in per sample during training.
    """

    def __init__(self, frames: int, feature_dim: int, cond_channels: int, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.frames = frames
        self.feature_dim = feature_dim
        self.cond_channels = cond_channels
        self.cfg = cfg
        H = cfg.hidden
        self.context = ContextConfig(cfg.context)
        self.adapter = Adapter(cfg.context * cond_channels, frames, H)
        self.null_tokens = nn.Parameter(0.02 * torch.randn(frames, H))
        self.in_proj = nn.Linear(feature_dim, H)
        self.time_mlp = _mlp(cfg.time_embed_dim, H, H)
        pos = sinusoidal_embedding(torch.arange(frames, dtype=torch.float32), H, max_period=100.0)
        self.register_buffer("pos", pos, persistent=False)
        self.blocks = nn.ModuleList(Block(H, cfg.heads) for _ in range(cfg.blocks))
        self.norm_out = nn.LayerNorm(H)
        self.head = nn.Linear(H, feature_dim)

    def encode(self, cond, drop_mask=None) -> torch.Tensor:
        if cond is None:
            return self.null_tokens.unsqueeze(0)
        tokens = adapt(build_context(cond, self.context), self.adapter)
        if drop_mask is not None:
            tokens = torch.where(drop_mask[:, None, None], self.null_tokens.expand_as(tokens), tokens)
        return tokens

    def features(self, z, t, tokens) -> torch.Tensor:
        if z.shape[1:] != (self.frames, self.feature_dim):
            raise ShapeError(f"latent shape {tuple(z.shape)} does not match the network")
        B = z.shape[0]
        t = torch.as_tensor(t, dtype=z.dtype, device=z.device)
        if t.ndim == 0:
            t = t.expand(B)
        temb = self.time_mlp(sinusoidal_embedding(1000.0 * t, self.cfg.time_embed_dim))
        pos = self.pos.to(z.dtype)
        x = self.in_proj(z) + pos + temb[:, None, :]
        c = tokens.expand(B, -1, -1) + pos
        for block in self.blocks:
            x = block(x, c)
        return self.norm_out(x)

    def velocity(self, z, t, tokens) -> torch.Tensor:
        v = self.head(self.features(z, t, tokens))
        if not torch.isfinite(v).all():
            raise NumericDivergence("non-finite velocity")
        return v

    def forward(self, z, t, cond, drop_mask=None):
        return self.velocity(z, t, self.encode(cond, drop_mask))


class _VelocityView(nn.Module):
    def __init__(self, net):
        super().__init__()
        self.net = net

    def forward(self, z, t, tokens):
        return self.net.velocity(z, t, tokens)


def velocity_net_forward(net: VelocityNet, params: dict, z, t, tokens) -> torch.Tensor:
    """Evaluate ``net.velocity`` with an explicit (possibly partial) parameter dict."""
    view = _VelocityView(net)
    return functional_call(view, {f"net.{k}": v for k, v in params.items()}, (z, t, tokens), strict=False)
