"""Transformer decoder, straight-through composition and the training objective."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn as nn

from .config import ConfigError, LossWeights, ModelConfig
from .hquant import TokenizedSequence
from .stencoder import PreNormBlock


def straight_through(z: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Forward value ``q``; backward acts as the identity on ``z``."""
    if z.shape != q.shape:
        raise ValueError(f"straight_through shape mismatch {tuple(z.shape)} vs {tuple(q.shape)}")
    return z + (q - z).detach()


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        width = 2 * cfg.ssm.hidden
        dcfg = cfg.decoder
        self.width = width
        self.pos = nn.Parameter(torch.randn(cfg.window, width) * 0.02)
        self.blocks = nn.ModuleList(
            PreNormBlock(width, dcfg.heads, dcfg.ff_mult, dcfg.dropout) for _ in range(dcfg.layers)
        )
        self.out = nn.Linear(width, cfg.n_rois)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.width:
            raise ConfigError(f"decoder expects width {self.width}, got {z.shape[-1]}")
        x = z + self.pos[: z.shape[-2]]
        for blk in self.blocks:
            x = blk(x)
        return self.out(x)


def decode(tokens: TokenizedSequence, decoder: Decoder) -> torch.Tensor:
    """Reconstruct (..., W, M) from the concatenated quantized state and transition embeddings."""
    z = torch.cat([tokens.quantized_states, tokens.quantized_transitions], dim=-1)
    return decoder(z)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    recon: torch.Tensor
    state_cb: torch.Tensor
    state_res_cb: torch.Tensor
    transition_cb: torch.Tensor
    transition_res_cb: torch.Tensor
    commitment: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _sqdist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # squared L2 over the feature axis, mean over every other axis
    return ((a - b) ** 2).sum(-1).mean()


def total_loss(x, x_hat, o_seq, o_hat, eps_o, h_seq, h_hat, eps_h, weights: LossWeights) -> LossBreakdown:
    """Weighted reconstruction + codebook objective.

    Codebook terms see the encoder outputs only through ``detach``, so they
    train codebook vectors and never the encoder.
    """
    for name in ("alpha", "beta", "gamma_loss", "commitment"):
        if getattr(weights, name) < 0:
            raise ConfigError(f"negative loss weight {name}")
    recon = ((x - x_hat) ** 2).mean()
    o_d, h_d = o_seq.detach(), h_seq.detach()
    state_cb = _sqdist(o_d, o_hat)
    transition_cb = _sqdist(h_d, h_hat)
    state_res_cb = _sqdist(o_d - o_hat.detach(), eps_o)
    transition_res_cb = _sqdist(h_d - h_hat.detach(), eps_h)
    if weights.commitment > 0:
        commitment = _sqdist(o_seq, o_hat.detach()) + _sqdist(h_seq, h_hat.detach())
    else:
        commitment = torch.zeros((), dtype=recon.dtype, device=recon.device)
    total = (
        weights.alpha * recon
        + weights.beta * (state_cb + transition_cb)
        + weights.gamma_loss * (state_res_cb + transition_res_cb)
        + weights.commitment * commitment
    )
    return LossBreakdown(total, recon, state_cb, state_res_cb, transition_cb, transition_res_cb, commitment)
