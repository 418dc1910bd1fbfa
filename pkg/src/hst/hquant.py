"""Hierarchical vector quantizer for brain states and transitions.

First-level state/transition codebooks, second-level codebooks over the
first-level residual, and an online revival update that drags rarely used
codes onto the batch feature closest to them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from sklearn.cluster import kmeans_plusplus

from .config import QuantizerConfig

ROLES = ("state", "transition", "state_residual", "transition_residual")
_CHUNK = 4096


class Codebook(nn.Module):
    def __init__(self, K: int, D: int, role: str, gamma: float = 0.99, pin_zero: bool = False):
        super().__init__()
        if K < 2:
            raise ValueError(f"codebook needs K >= 2, got {K}")
        if role not in ROLES:
            raise ValueError(f"unknown codebook role {role!r}")
        self.role = role
        self.gamma = gamma
        self.pin_zero = pin_zero
        self.vectors = nn.Parameter(torch.randn(K, D))
        self.register_buffer("counts", torch.zeros(K))
        if pin_zero:
            with torch.no_grad():
                self.vectors[0].zero_()

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    @torch.no_grad()
    def repin(self) -> None:
        if self.pin_zero:
            self.vectors[0].zero_()

    def extra_repr(self) -> str:
        return f"K={self.K}, D={self.D}, role={self.role}, gamma={self.gamma}, pin_zero={self.pin_zero}"


def _codes(cb) -> torch.Tensor:
    return cb.vectors if isinstance(cb, Codebook) else cb


@torch.no_grad()
def nearest_indices(z: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Index of the nearest code (squared Euclidean); ties go to the lowest index."""
    flat = z.reshape(-1, z.shape[-1])
    out = torch.empty(flat.shape[0], dtype=torch.long, device=z.device)
    codes = codes.detach()
    for i in range(0, flat.shape[0], _CHUNK):
        chunk = flat[i:i + _CHUNK]
        d = ((chunk.unsqueeze(1) - codes.unsqueeze(0)) ** 2).sum(-1)
        out[i:i + _CHUNK] = d.argmin(dim=1)
    return out.reshape(z.shape[:-1])


def nearest_assign(z: torch.Tensor, cb) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest codebook vector for each row of ``z``; returns (index, code).

    The code is gathered from the live codebook tensor, so gradients reach
    the codebook but never ``z``.
    """
    codes = _codes(cb)
    if z.shape[-1] != codes.shape[-1]:
        raise ValueError(f"feature width {z.shape[-1]} != codebook width {codes.shape[-1]}")
    if not torch.all(torch.isfinite(z)):
        raise ValueError("cannot quantize non-finite features")
    idx = nearest_indices(z, codes)
    return idx, codes[idx]


def residual_assign(z: torch.Tensor, first_code: torch.Tensor, cb_res) -> tuple[torch.Tensor, torch.Tensor]:
    return nearest_assign(z - first_code.detach(), cb_res)


@torch.no_grad()
def cluster_revive_update(cb: Codebook, batch_features: torch.Tensor, assignments: torch.Tensor) -> Codebook:
    """Online usage-count update followed by the revival move, in place.

    N_j <- gamma N_j + (1 - gamma) n_j with n_j the batch assignment counts;
    then e_j <- (1 - a_j) e_j + a_j z_j with a_j = exp(-N_j K 10 / (1 - gamma))
    and z_j the batch feature closest to e_j.
    """
    K, gamma = cb.K, cb.gamma
    feats = batch_features.reshape(-1, cb.D).to(cb.vectors.dtype)
    assignments = assignments.reshape(-1)
    n = torch.bincount(assignments, minlength=K).to(cb.counts.dtype)
    cb.counts.mul_(gamma).add_((1 - gamma) * n)
    if feats.shape[0] == 0:
        return cb
    alpha = torch.exp(-cb.counts * K * 10.0 / (1 - gamma)).to(cb.vectors.dtype)
    nearest_feat = nearest_indices(cb.vectors.detach(), feats)
    z_hat = feats[nearest_feat]
    a = alpha.unsqueeze(1)
    moved = cb.vectors * (1 - a) + z_hat * a
    if cb.pin_zero:
        moved[0] = cb.vectors[0]
    cb.vectors.copy_(moved)
    return cb


def revival_weight(N, K: int, gamma: float):
    return np.exp(-np.asarray(N, dtype=np.float64) * K * 10.0 / (1 - gamma))


@dataclass
class TokenizedSequence:
    state_tokens: torch.Tensor
    transition_tokens: torch.Tensor
    state_residual_tokens: torch.Tensor
    transition_residual_tokens: torch.Tensor
    quantized_states: torch.Tensor        # o_hat + eps_o
    quantized_transitions: torch.Tensor   # h_hat + eps_h
    o_hat: torch.Tensor
    h_hat: torch.Tensor
    eps_o: torch.Tensor
    eps_h: torch.Tensor

    def detach(self) -> "TokenizedSequence":
        return TokenizedSequence(*(getattr(self, f).detach() for f in self.__dataclass_fields__))


def quantize_pair(o_seq: torch.Tensor, h_seq: torch.Tensor, codebooks, mode: str = "hierarchical",
                  literal_transition_residual: bool = False) -> TokenizedSequence:
    """Two-level quantization of state outputs and transition states.

    ``codebooks`` maps each role in ROLES to a Codebook (or a raw code tensor).
    In ``flat`` mode the residual stage is skipped (residual tokens are -1 and
    residual codes zero).
    """
    D = o_seq.shape[-1]
    for role in ROLES[:2]:
        if _codes(codebooks[role]).shape[-1] != D or h_seq.shape[-1] != D:
            raise ValueError(f"codebook {role} width does not match feature width {D}")
    ks, o_hat = nearest_assign(o_seq, codebooks["state"])
    kt, h_hat = nearest_assign(h_seq, codebooks["transition"])
    if mode == "flat":
        zeros = torch.zeros_like(o_hat)
        neg = torch.full_like(ks, -1)
        return TokenizedSequence(ks, kt, neg, neg.clone(), o_hat, h_hat, o_hat, h_hat, zeros, zeros.clone())
    res_t = codebooks["state_residual" if literal_transition_residual else "transition_residual"]
    kso, eps_o = residual_assign(o_seq, o_hat, codebooks["state_residual"])
    kth, eps_h = residual_assign(h_seq, h_hat, res_t)
    return TokenizedSequence(ks, kt, kso, kth, o_hat + eps_o, h_hat + eps_h, o_hat, h_hat, eps_o, eps_h)


def codebook_metrics(assignments, K: int) -> dict:
    a = np.asarray(assignments.detach().cpu() if torch.is_tensor(assignments) else assignments).reshape(-1)
    a = a[a >= 0]
    usage = np.bincount(a, minlength=K)[:K] if a.size else np.zeros(K, dtype=np.int64)
    total = usage.sum()
    if total == 0:
        return {"usage": usage.tolist(), "perplexity": float("nan"), "dead_codes": K}
    p = usage[usage > 0] / total
    return {
        "usage": usage.tolist(),
        "perplexity": float(math.exp(-(p * np.log(p)).sum())),
        "dead_codes": int((usage == 0).sum()),
    }


def _kmeanspp(feats: torch.Tensor, k: int, seed: int) -> torch.Tensor:
    X = feats.detach().reshape(-1, feats.shape[-1]).double().cpu().numpy()
    if X.shape[0] < k:
        rng = np.random.default_rng(seed)
        extra = X[rng.integers(0, X.shape[0], k - X.shape[0])] + 1e-3 * rng.standard_normal((k - X.shape[0], X.shape[1]))
        X = np.concatenate([X, extra])
    centers, _ = kmeans_plusplus(X, k, random_state=seed)
    return torch.as_tensor(centers, dtype=feats.dtype)


class HierarchicalQuantizer(nn.Module):
    def __init__(self, D: int, cfg: QuantizerConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.gamma
        self.codebooks = nn.ModuleDict({
            "state": Codebook(cfg.state_codes, D, "state", g),
            "transition": Codebook(cfg.transition_codes, D, "transition", g),
            "state_residual": Codebook(cfg.state_residual_codes, D, "state_residual", g, pin_zero=True),
            "transition_residual": Codebook(cfg.transition_residual_codes, D, "transition_residual", g, pin_zero=True),
        })
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    def __getitem__(self, role: str) -> Codebook:
        return self.codebooks[role]

    def forward(self, o_seq: torch.Tensor, h_seq: torch.Tensor) -> TokenizedSequence:
        return quantize_pair(o_seq, h_seq, self.codebooks, self.cfg.mode, self.cfg.literal_transition_residual)

    @torch.no_grad()
    def init_from_features(self, o_seq: torch.Tensor, h_seq: torch.Tensor, seed: int = 0) -> None:
        """k-means++ seeding from a batch of features; residual books keep code 0 at the origin."""
        cbs = self.codebooks
        cbs["state"].vectors.copy_(_kmeanspp(o_seq, cbs["state"].K, seed))
        cbs["transition"].vectors.copy_(_kmeanspp(h_seq, cbs["transition"].K, seed + 1))
        _, o_hat = nearest_assign(o_seq, cbs["state"])
        _, h_hat = nearest_assign(h_seq, cbs["transition"])
        ro, rh = o_seq - o_hat, h_seq - h_hat
        if self.cfg.literal_transition_residual:
            ro = torch.cat([ro.reshape(-1, ro.shape[-1]), rh.reshape(-1, rh.shape[-1])])
        for role, r, s in (("state_residual", ro, seed + 2), ("transition_residual", rh, seed + 3)):
            cb = cbs[role]
            cb.vectors[0].zero_()
            cb.vectors[1:].copy_(_kmeanspp(r, cb.K - 1, s))
        for cb in cbs.values():
            cb.counts.zero_()
        self.initialized.fill_(True)

    @torch.no_grad()
    def revive(self, o_seq: torch.Tensor, h_seq: torch.Tensor, tokens: TokenizedSequence) -> None:
        """Usage-count update and revival move on every active codebook."""
        cbs = self.codebooks
        D = o_seq.shape[-1]
        o, h = o_seq.detach().reshape(-1, D), h_seq.detach().reshape(-1, D)
        cluster_revive_update(cbs["state"], o, tokens.state_tokens)
        cluster_revive_update(cbs["transition"], h, tokens.transition_tokens)
        if self.cfg.mode != "hierarchical":
            return
        ro = o - tokens.o_hat.detach().reshape(-1, D)
        rh = h - tokens.h_hat.detach().reshape(-1, D)
        if self.cfg.literal_transition_residual:
            cluster_revive_update(
                cbs["state_residual"], torch.cat([ro, rh]),
                torch.cat([tokens.state_residual_tokens.reshape(-1), tokens.transition_residual_tokens.reshape(-1)]),
            )
        else:
            cluster_revive_update(cbs["state_residual"], ro, tokens.state_residual_tokens)
            cluster_revive_update(cbs["transition_residual"], rh, tokens.transition_residual_tokens)

    @torch.no_grad()
    def repin(self) -> None:
        for cb in self.codebooks.values():
            cb.repin()
