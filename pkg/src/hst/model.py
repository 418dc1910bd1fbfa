"""The full tokenizer: encoder -> backbone -> hierarchical quantizer -> decoder."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import LossWeights, ModelConfig
from .hquant import HierarchicalQuantizer, TokenizedSequence
from .recon import Decoder, LossBreakdown, decode, straight_through, total_loss
from .ssmcore import SSMCore, StatePair
from .stencoder import FusedRepresentation, SpatioTemporalEncoder


@dataclass
class ModelOutput:
    x_hat: torch.Tensor
    tokens: TokenizedSequence       # quantized_* carry straight-through gradients
    pair: StatePair
    fused: FusedRepresentation


class HSTModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SpatioTemporalEncoder(cfg)
        self.core = SSMCore(cfg.n_rois, cfg.ssm)
        self.quantizer = HierarchicalQuantizer(cfg.ssm.hidden, cfg.quantizer)
        self.decoder = Decoder(cfg)

    @property
    def mode(self) -> str:
        return self.cfg.quantizer.mode

    def encode(self, X: torch.Tensor) -> tuple[StatePair, FusedRepresentation]:
        fused = self.encoder(X)
        return self.core(fused.Hf), fused

    def quantize(self, pair: StatePair) -> TokenizedSequence:
        o, h = pair.o_seq, pair.h_seq
        if self.mode == "continuous":
            zeros = torch.zeros_like(o)
            neg = torch.full(o.shape[:-1], -1, dtype=torch.long, device=o.device)
            return TokenizedSequence(neg, neg, neg, neg, o, h, o, h, zeros, zeros)
        tok = self.quantizer(o, h)
        return dataclasses.replace(
            tok,
            quantized_states=straight_through(o, tok.quantized_states),
            quantized_transitions=straight_through(h, tok.quantized_transitions),
        )

    def forward(self, X: torch.Tensor) -> ModelOutput:
        pair, fused = self.encode(X)
        tokens = self.quantize(pair)
        return ModelOutput(decode(tokens, self.decoder), tokens, pair, fused)

    def loss(self, X: torch.Tensor, out: ModelOutput, weights: LossWeights) -> LossBreakdown:
        t, p = out.tokens, out.pair
        if self.mode != "hierarchical":
            weights = dataclasses.replace(weights, gamma_loss=0.0)
        if self.mode == "continuous":
            weights = dataclasses.replace(weights, beta=0.0, commitment=0.0)
        return total_loss(X, out.x_hat, p.o_seq, t.o_hat, t.eps_o, p.h_seq, t.h_hat, t.eps_h, weights)

    @torch.no_grad()
    def init_codebooks(self, X: torch.Tensor, seed: int = 0) -> None:
        if self.mode == "continuous":
            return
        pair, _ = self.encode(X)
        self.quantizer.init_from_features(pair.o_seq, pair.h_seq, seed)

    def codebook_parameters(self):
        return list(self.quantizer.parameters())
