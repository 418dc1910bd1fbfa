"""Sequence backbones producing transition states h_t and state outputs o_t.

Four interchangeable recurrences (RNN, LSTM, GRU and a diagonal selective
state-space scan) share one state head, o_t = MLP(h_{t-1} || x_t).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BACKENDS, ConfigError, SsmConfig

_SERIES_CUTOFF = 1e-6


@dataclass
class StatePair:
    h_seq: torch.Tensor  # (..., W, D) transition representations
    o_seq: torch.Tensor  # (..., W, D) state representations


# ---------------------------------------------------------------- step functions

def rnn_step(h_prev, x_t, W_h, W_x, b_h):
    """h_t = tanh(W_h h_{t-1} + W_x x_t + b_h)."""
    return torch.tanh(F.linear(h_prev, W_h) + F.linear(x_t, W_x) + b_h)


def gated_step(h_prev, c_prev, x_t, params: dict, kind: str):
    """One LSTM or GRU update.

    ``params`` holds ``w_ih``, ``w_hh``, ``b_ih``, ``b_hh`` with gates stacked
    along the first axis in the torch order (LSTM: i, f, g, o; GRU: r, z, n),
    so weights can be read straight from ``nn.LSTM``/``nn.GRU``.
    Returns ``(h_t, c_t)``; ``c_t`` is None for GRU.
    """
    gi = F.linear(x_t, params["w_ih"], params["b_ih"])
    gh = F.linear(h_prev, params["w_hh"], params["b_hh"])
    if kind == "LSTM":
        i, f, g, o = (gi + gh).chunk(4, dim=-1)
        i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
        c = f * c_prev + i * torch.tanh(g)
        return o * torch.tanh(c), c
    if kind == "GRU":
        ir, iz, in_ = gi.chunk(3, dim=-1)
        hr, hz, hn = gh.chunk(3, dim=-1)
        r = torch.sigmoid(ir + hr)
        z = torch.sigmoid(iz + hz)
        n = torch.tanh(in_ + r * hn)
        return (1 - z) * n + z * h_prev, None
    raise ConfigError(f"gated_step kind must be LSTM or GRU, got {kind!r}")


def state_head(h_prev, x_t, W1, b1, W2, b2, linear: bool = False):
    """o_t = W2 act(W1 (h_{t-1} || x_t) + b1) + b2, act = ReLU unless ``linear``."""
    z = F.linear(torch.cat([h_prev, x_t], dim=-1), W1, b1)
    if not linear:
        z = F.relu(z)
    return F.linear(z, W2, b2)


# ---------------------------------------------------------------- ZOH discretization

def _phi(z: torch.Tensor) -> torch.Tensor:
    """(exp(z) - 1) / z with the series 1 + z/2 near zero."""
    small = z.abs() < _SERIES_CUTOFF
    safe = torch.where(small, torch.ones_like(z), z)
    return torch.where(small, 1 + z / 2, torch.expm1(safe) / safe)


def zoh_discretize(A: torch.Tensor, B: torch.Tensor, delta: torch.Tensor):
    """Zero-order-hold discretization of a diagonal system.

    ``A`` is the diagonal (D,) or a diagonal (D, D) matrix, ``B`` is (D, din)
    and ``delta`` the positive step per state dimension (D,) or a scalar.
    Returns ``(A_bar, B_bar)`` with ``A_bar`` the (D,) diagonal exp(delta*A)
    and ``B_bar = (delta A)^-1 (exp(delta A) - I) delta B`` of shape (D, din).
    """
    A = torch.as_tensor(A)
    if A.dim() == 2:
        if not torch.equal(A, torch.diag(torch.diagonal(A))):
            raise ValueError("A must be diagonal")
        A = torch.diagonal(A)
    delta = torch.as_tensor(delta, dtype=A.dtype)
    if torch.any(delta <= 0):
        raise ValueError("step sizes delta must be strictly positive")
    z = delta * A
    A_bar = torch.exp(z)
    B_bar = (_phi(z) * delta).unsqueeze(-1) * B
    return A_bar, B_bar


# ---------------------------------------------------------------- selective scan

@dataclass
class SelectiveSsmParams:
    log_neg_a: torch.Tensor   # (D,) A = -exp(log_neg_a)
    B: torch.Tensor           # (D, din)
    w_delta: torch.Tensor     # (D, din)
    b_delta: torch.Tensor     # (D,)
    w_gate: torch.Tensor      # (D, din) input-dependent scaling of B
    b_gate: torch.Tensor      # (D,)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.log_neg_a)


def selective_inputs(x_seq: torch.Tensor, p: SelectiveSsmParams):
    """Per-step decay and drive: A_bar_t (..., W, D) and B_bar_t x_t (..., W, D)."""
    delta = F.softplus(F.linear(x_seq, p.w_delta, p.b_delta))
    gate = F.linear(x_seq, p.w_gate, p.b_gate)
    z = delta * p.A
    A_bar = torch.exp(z)
    drive = _phi(z) * delta * gate * F.linear(x_seq, p.B)
    return A_bar, drive


def selective_scan(x_seq: torch.Tensor, params: SelectiveSsmParams) -> torch.Tensor:
    """h_t = A_bar_t h_{t-1} + B_bar_t x_t from h_0 = 0, with input-dependent step and B."""
    A_bar, drive = selective_inputs(x_seq, params)
    h = torch.zeros_like(drive[..., 0, :])
    out = []
    for t in range(x_seq.shape[-2]):
        h = A_bar[..., t, :] * h + drive[..., t, :]
        out.append(h)
    return torch.stack(out, dim=-2)


class SelectiveSSMLayer(nn.Module):
    def __init__(self, din: int, D: int, a_scale: float = 1.0, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        a = a_scale * torch.logspace(-3, 0, D)  # |A| log-spaced in [1e-3, 1] * scale
        self.log_neg_a = nn.Parameter(torch.log(a))
        self.B = nn.Parameter(torch.randn(D, din) / math.sqrt(din))
        self.w_delta = nn.Parameter(torch.randn(D, din) * 0.01)
        dt = torch.exp(torch.rand(D) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.b_delta = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
        self.w_gate = nn.Parameter(torch.randn(D, din) * 0.01)
        self.b_gate = nn.Parameter(torch.ones(D))
        self.norm = nn.LayerNorm(din)

    @property
    def params(self) -> SelectiveSsmParams:
        return SelectiveSsmParams(self.log_neg_a, self.B, self.w_delta, self.b_delta, self.w_gate, self.b_gate)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return selective_scan(self.norm(x), self.params)


# ---------------------------------------------------------------- backbone

class StateHead(nn.Module):
    def __init__(self, D: int, din: int, linear: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(D + din, D)
        self.fc2 = nn.Linear(D, D)
        self.linear = linear

    def forward(self, h_prev, x_t):
        return state_head(h_prev, x_t, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias, self.linear)


class SSMCore(nn.Module):
    """Input projection, stacked recurrence and the state head."""

    def __init__(self, in_dim: int, cfg: SsmConfig):
        super().__init__()
        if cfg.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {cfg.backend!r}")
        self.cfg = cfg
        D = cfg.hidden
        self.proj = nn.Linear(in_dim, D)
        if cfg.backend == "SelectiveSSM":
            self.layers = nn.ModuleList(SelectiveSSMLayer(D, D, cfg.a_scale) for _ in range(cfg.layers))
        else:
            rnn_cls = {"RNN": nn.RNN, "LSTM": nn.LSTM, "GRU": nn.GRU}[cfg.backend]
            self.rnn = rnn_cls(D, D, num_layers=cfg.layers, batch_first=True)
        self.head = StateHead(D, in_dim, cfg.linear_state_head)

    def transitions(self, Hf: torch.Tensor) -> torch.Tensor:
        x = self.proj(Hf)
        if self.cfg.backend == "SelectiveSSM":
            for layer in self.layers:
                x = layer(x)
            return x
        squeeze = x.dim() == 2
        out = self.rnn(x.unsqueeze(0) if squeeze else x)[0]
        return out.squeeze(0) if squeeze else out

    def forward(self, Hf: torch.Tensor) -> StatePair:
        h = self.transitions(Hf)
        h_prev = torch.cat([torch.zeros_like(h[..., :1, :]), h[..., :-1, :]], dim=-2)
        return StatePair(h, self.head(h_prev, Hf))


def run_backbone(Hf: torch.Tensor, core: SSMCore) -> StatePair:
    if not torch.all(torch.isfinite(Hf)):
        raise ValueError("backbone input contains non-finite values")
    return core(Hf)
