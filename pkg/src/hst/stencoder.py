"""Spatio-temporal encoder: self-attention over time tokens and over ROI
tokens, squeeze-excite gates, and gated cross fusion of the two branches."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, EncoderConfig, ModelConfig


@dataclass
class FusedRepresentation:
    Hf: torch.Tensor   # (..., W, M)
    At: torch.Tensor   # (..., W)
    As: torch.Tensor   # (..., M)
    Ht: torch.Tensor   # (..., W, M)
    Hs: torch.Tensor   # (..., M, W)


def excite(H: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor, w2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    """Squeeze-excite gate over the token axis.

    H is (..., N, C). Each token is squeezed to its mean over C, the N
    squeezed values go through ``sigmoid(w2 @ relu(w1 @ s + b1) + b2)``.
    Returns (..., N) with entries in (0, 1).
    """
    s = H.mean(dim=-1)
    return torch.sigmoid(F.linear(F.relu(F.linear(s, w1, b1)), w2, b2))


class SqueezeExcite(nn.Module):
    def __init__(self, n_tokens: int, bottleneck: int | None = None):
        super().__init__()
        r = bottleneck or max(4, n_tokens // 4)
        self.fc1 = nn.Linear(n_tokens, r)
        self.fc2 = nn.Linear(r, n_tokens)

    def forward(self, H: torch.Tensor) -> torch.Tensor:
        return excite(H, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


def cross_fuse(Ht: torch.Tensor, Hs: torch.Tensor, At: torch.Tensor, As: torch.Tensor) -> torch.Tensor:
    """Hf[t, m] = Ht[t, m] * As[m] + Hs[m, t] * At[t] (batched over leading axes)."""
    W, M = Ht.shape[-2:]
    if Hs.shape[-2:] != (M, W) or At.shape[-1] != W or As.shape[-1] != M:
        raise ValueError(
            f"cross_fuse shape mismatch: Ht {tuple(Ht.shape)}, Hs {tuple(Hs.shape)}, "
            f"At {tuple(At.shape)}, As {tuple(As.shape)}"
        )
    return Ht * As.unsqueeze(-2) + Hs.transpose(-1, -2) * At.unsqueeze(-1)


class PreNormBlock(nn.Module):
    def __init__(self, width: int, heads: int, ff_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        if width % heads:
            raise ConfigError(f"token width {width} not divisible by {heads} heads")
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.ff = nn.Sequential(
            nn.Linear(width, ff_mult * width),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ff_mult * width, width),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, h, need_weights=False)[0])
        return x + self.drop(self.ff(self.norm2(x)))


class TokenEncoder(nn.Module):
    """Dimension-preserving transformer encoder (token width == model width)."""

    def __init__(self, width: int, cfg: EncoderConfig, n_positions: int | None = None):
        super().__init__()
        self.width = width
        self.blocks = nn.ModuleList(
            PreNormBlock(width, cfg.heads, cfg.ff_mult, cfg.dropout) for _ in range(cfg.layers)
        )
        self.pos = nn.Parameter(torch.zeros(n_positions, width)) if n_positions else None
        if self.pos is not None:
            nn.init.normal_(self.pos, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.width:
            raise ConfigError(f"token width {x.shape[-1]} does not match encoder width {self.width}")
        if self.pos is not None:
            if x.shape[-2] != self.pos.shape[0]:
                raise ConfigError(f"sequence length {x.shape[-2]} does not match {self.pos.shape[0]} positions")
            x = x + self.pos
        for blk in self.blocks:
            x = blk(x)
        return x


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.dim() == 2 else (x, False)


def encode_temporal(Xw: torch.Tensor, enc: TokenEncoder) -> torch.Tensor:
    """Encode W time-point tokens of width M. Returns (..., W, M)."""
    x, squeeze = _batched(Xw)
    out = enc(x)
    return out.squeeze(0) if squeeze else out


def encode_spatial(Xw: torch.Tensor, enc: TokenEncoder) -> torch.Tensor:
    """Encode M ROI tokens of width W. Returns (..., M, W)."""
    x, squeeze = _batched(Xw)
    out = enc(x.transpose(-1, -2))
    return out.squeeze(0) if squeeze else out


class SpatioTemporalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ecfg = cfg.encoder
        W, M = cfg.window, cfg.n_rois
        self.spatial_gate_source = ecfg.spatial_gate_source
        self.temporal = TokenEncoder(M, ecfg, n_positions=W if ecfg.positional else None)
        self.spatial = TokenEncoder(W, ecfg, n_positions=None)
        self.gate_t = SqueezeExcite(W)
        self.gate_s = SqueezeExcite(M)

    def forward(self, X: torch.Tensor) -> FusedRepresentation:
        Ht = encode_temporal(X, self.temporal)
        Hs = encode_spatial(X, self.spatial)
        At = self.gate_t(Ht)
        src = Hs if self.spatial_gate_source == "spatial" else Ht.transpose(-1, -2)
        As = self.gate_s(src)
        return FusedRepresentation(cross_fuse(Ht, Hs, At, As), At, As, Ht, Hs)
