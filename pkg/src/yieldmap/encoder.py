"""ViT encoder: patch embedding, spatio-temporal embeddings and pre-norm blocks.

Tokens are ordered time-major, then grid row, then grid column. In
PER_TIMESTEP mode every frame is embedded with the same projection and the
frame grids are concatenated along the token axis; in FLATTENED_CHANNELS
mode the ``C*T`` channels are embedded jointly into a single grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .chipstore import InputMode


@dataclass
class EncoderConfig:
    img_size: int = 96
    num_frames: int = 5
    in_chans: int = 6
    patch_size: int = 16
    embed_dim: int = 128
    depth: int = 8
    num_heads: int = 4
    mlp_ratio: float = 4.0
    tap_layers: tuple[int, ...] = (2, 4, 6, 8)
    mode: InputMode = InputMode.PER_TIMESTEP
    use_location: bool = False

    def __post_init__(self):
        self.mode = InputMode(self.mode)
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        self.validate()

    def validate(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.img_size % self.patch_size:
            raise ValueError(
                f"image size {self.img_size} not divisible by patch size {self.patch_size}"
            )
        taps = self.tap_layers
        # repeats are allowed so that encoders shallower than 4 blocks can still feed 4 levels
        if len(taps) != 4 or any(b < a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"tap_layers must be 4 ascending indices, got {taps}")
        if taps[0] < 1 or taps[-1] > self.depth:
            raise ValueError(f"tap_layers {taps} outside 1..{self.depth}")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def frames_in_tokens(self) -> int:
        return self.num_frames if self.mode is InputMode.PER_TIMESTEP else 1

    @property
    def num_tokens(self) -> int:
        return self.frames_in_tokens * self.grid**2

    def token_index(self) -> np.ndarray:
        """[N, 3] array mapping each token to (time step, grid row, grid col)."""
        t, r, c = np.meshgrid(
            np.arange(self.frames_in_tokens), np.arange(self.grid), np.arange(self.grid),
            indexing="ij",
        )
        return np.stack([t.ravel(), r.ravel(), c.ravel()], axis=1)


def trunc_normal_(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


class PatchEmbed(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.in_chans if cfg.mode is InputMode.PER_TIMESTEP else cfg.in_chans * cfg.num_frames
        self.proj = nn.Conv2d(chans, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        p = cfg.patch_size
        if x.shape[-1] % p or x.shape[-2] % p:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by patch size {p}")
        if cfg.mode is InputMode.PER_TIMESTEP:
            if x.ndim != 5:
                raise ValueError(f"PER_TIMESTEP input must be [B, T, C, H, W], got {tuple(x.shape)}")
            B, T = x.shape[:2]
            z = self.proj(x.flatten(0, 1))  # [B*T, D, gh, gw]
            z = z.flatten(2).transpose(1, 2)  # [B*T, gh*gw, D]
            return z.reshape(B, T * z.shape[1], -1)
        if x.ndim != 4:
            raise ValueError(f"FLATTENED_CHANNELS input must be [B, C*T, H, W], got {tuple(x.shape)}")
        return self.proj(x).flatten(2).transpose(1, 2)


class Embeddings(nn.Module):
    """Learnable positional, temporal and optional location embeddings."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        self.pos = nn.Parameter(torch.zeros(cfg.grid**2, D))
        self.temporal = nn.Parameter(torch.zeros(cfg.frames_in_tokens, D))
        self.location = nn.Linear(2, D) if cfg.use_location else None

    def forward(self, tokens: torch.Tensor, latlon: torch.Tensor | None = None) -> torch.Tensor:
        B, N, D = tokens.shape
        frames = self.temporal.shape[0]
        if N != frames * self.pos.shape[0]:
            raise ValueError(f"{N} tokens do not match embedding tables ({frames}x{self.pos.shape[0]})")
        table = (self.temporal[:, None, :] + self.pos[None, :, :]).reshape(N, D)
        out = tokens + table
        if self.location is not None and latlon is not None:
            out = out + self.location(latlon)[:, None, :]
        return out


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)  # [B, h, N, d_k]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out), attn


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, attn


@dataclass
class AttentionRecord:
    layer: int  # 1-based block index
    weights: torch.Tensor  # [B, h, N, N]


@dataclass
class EncoderOutput:
    features: list[torch.Tensor]  # one [B, N, D] per tap layer
    attention: list[AttentionRecord] = field(default_factory=list)


class ViTEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.embed = Embeddings(cfg)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                trunc_normal_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        trunc_normal_(self.embed.pos)
        trunc_normal_(self.embed.temporal)

    def forward(self, x: torch.Tensor, latlon: torch.Tensor | None = None,
                capture: bool = False) -> EncoderOutput:
        tokens = self.embed(self.patch_embed(x), latlon)
        out = EncoderOutput([])
        for i, blk in enumerate(self.blocks, start=1):
            tokens, attn = blk(tokens)
            if capture:
                out.attention.append(AttentionRecord(i, attn.detach()))
            out.features.extend(tokens for t in self.cfg.tap_layers if t == i)
        return out
