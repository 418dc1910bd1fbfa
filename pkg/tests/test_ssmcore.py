import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from hst.config import ConfigError, SsmConfig
from hst.ssmcore import (
    SelectiveSsmParams, SSMCore, gated_step, rnn_step, run_backbone, selective_scan, state_head, zoh_discretize,
)

from conftest import check_grads

BACKENDS = ["RNN", "LSTM", "GRU", "SelectiveSSM"]
dt = torch.float64


# ---------------------------------------------------------------- recurrent steps

def test_rnn_step_zero_weights():
    D = 3
    h = rnn_step(torch.randn(D), torch.randn(2), torch.zeros(D, D), torch.zeros(D, 2), torch.zeros(D))
    torch.testing.assert_close(h, torch.zeros(D))


def test_rnn_step_scalar():
    h = rnn_step(torch.tensor([0.0]), torch.tensor([1.0]), torch.tensor([[1.0]]), torch.tensor([[0.5]]), torch.zeros(1))
    assert h.item() == pytest.approx(math.tanh(0.5), abs=1e-7)


def _zero_params(kind, D, din):
    g = 4 if kind == "LSTM" else 3
    return {"w_ih": torch.zeros(g * D, din), "w_hh": torch.zeros(g * D, D),
            "b_ih": torch.zeros(g * D), "b_hh": torch.zeros(g * D)}


def test_lstm_zero_weights_halves_cell():
    c_prev = torch.tensor([1.0, -2.0])
    h, c = gated_step(torch.randn(2), c_prev, torch.randn(3), _zero_params("LSTM", 2, 3), "LSTM")
    # i = f = o = 1/2, g = 0
    torch.testing.assert_close(c, c_prev / 2)
    torch.testing.assert_close(h, 0.5 * torch.tanh(c_prev / 2))


def test_gru_zero_weights_halves_state():
    h_prev = torch.tensor([0.8, -0.4])
    h, c = gated_step(h_prev, None, torch.randn(3), _zero_params("GRU", 2, 3), "GRU")
    # z = 1/2, n = 0
    torch.testing.assert_close(h, h_prev / 2)
    assert c is None


@pytest.mark.parametrize("kind", ["LSTM", "GRU"])
def test_gated_step_matches_torch_cell(kind):
    torch.manual_seed(0)
    cell = (torch.nn.LSTMCell if kind == "LSTM" else torch.nn.GRUCell)(3, 5).double()
    params = {"w_ih": cell.weight_ih, "w_hh": cell.weight_hh, "b_ih": cell.bias_ih, "b_hh": cell.bias_hh}
    x, h0, c0 = torch.randn(4, 3, dtype=dt), torch.randn(4, 5, dtype=dt), torch.randn(4, 5, dtype=dt)
    if kind == "LSTM":
        h_ref, c_ref = cell(x, (h0, c0))
        h, c = gated_step(h0, c0, x, params, kind)
        torch.testing.assert_close(c, c_ref)
    else:
        h_ref = cell(x, h0)
        h, _ = gated_step(h0, None, x, params, kind)
    torch.testing.assert_close(h, h_ref)


def test_gated_step_unknown_kind():
    with pytest.raises(ConfigError):
        gated_step(torch.zeros(1), None, torch.zeros(1), _zero_params("GRU", 1, 1), "TCN")


# ---------------------------------------------------------------- ZOH

def test_zoh_log_two():
    A_bar, B_bar = zoh_discretize(torch.tensor([1.0], dtype=dt), torch.tensor([[1.0]], dtype=dt),
                                  torch.tensor(math.log(2), dtype=dt))
    assert A_bar.item() == pytest.approx(2.0, abs=1e-12)
    assert B_bar.item() == pytest.approx(1.0, abs=1e-12)  # (2 - 1) / 1 * 1


def test_zoh_accepts_diagonal_matrix():
    A = torch.diag(torch.tensor([-1.0, -0.5], dtype=dt))
    a1, b1 = zoh_discretize(A, torch.ones(2, 1, dtype=dt), 0.3)
    a2, b2 = zoh_discretize(torch.diagonal(A), torch.ones(2, 1, dtype=dt), 0.3)
    torch.testing.assert_close(a1, a2)
    torch.testing.assert_close(b1, b2)
    with pytest.raises(ValueError):
        zoh_discretize(torch.ones(2, 2, dtype=dt), torch.ones(2, 1, dtype=dt), 0.3)


def _series_oracle(a: float, delta: float, terms: int = 20):
    # exp(dA) by Taylor series and (dA)^-1 (exp(dA) - 1) d = d * sum (dA)^k / (k+1)!
    z = a * delta
    expz = sum(z ** k / math.factorial(k) for k in range(terms))
    phi = sum(z ** k / math.factorial(k + 1) for k in range(terms))
    return expz, phi * delta


@settings(max_examples=50, deadline=None)
@given(st.floats(-2.0, -1e-3), st.floats(1e-3, 1.0), st.floats(-3, 3))
def test_zoh_matches_series(a, delta, b):
    A_bar, B_bar = zoh_discretize(torch.tensor([a], dtype=dt), torch.tensor([[b]], dtype=dt),
                                  torch.tensor(delta, dtype=dt))
    ea, eb = _series_oracle(a, delta)
    assert A_bar.item() == pytest.approx(ea, abs=1e-8)
    assert B_bar.item() == pytest.approx(eb * b, abs=1e-8)


def test_zoh_small_argument_branch_continuous():
    A = torch.tensor([-1e-9, -2e-6], dtype=dt)
    _, B_bar = zoh_discretize(A, torch.ones(2, 1, dtype=dt), torch.tensor(0.5, dtype=dt))
    torch.testing.assert_close(B_bar[:, 0], torch.full((2,), 0.5, dtype=dt), atol=1e-6, rtol=0)


@pytest.mark.parametrize("delta", [0.0, -0.1])
def test_zoh_rejects_nonpositive_step(delta):
    with pytest.raises(ValueError):
        zoh_discretize(torch.tensor([-1.0]), torch.ones(1, 1), torch.tensor(delta))


# ---------------------------------------------------------------- selective scan

def _random_params(D, din, seed=0):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=dt)
    return SelectiveSsmParams(r(D) * 0.5, r(D, din), r(D, din) * 0.3, r(D), r(D, din) * 0.3, torch.ones(D, dtype=dt))


def test_scan_zero_input_stays_zero():
    p = _random_params(4, 3)
    out = selective_scan(torch.zeros(6, 3, dtype=dt), p)
    torch.testing.assert_close(out, torch.zeros(6, 4, dtype=dt))


def _naive(x, p):
    D = p.B.shape[0]
    h = torch.zeros(D, dtype=dt)
    hs = []
    for t in range(x.shape[0]):
        delta = torch.nn.functional.softplus(p.w_delta @ x[t] + p.b_delta)
        g = p.w_gate @ x[t] + p.b_gate
        A_bar, B_bar = zoh_discretize(p.A, torch.diag(g) @ p.B, delta)
        h = A_bar * h + B_bar @ x[t]
        hs.append(h)
    return torch.stack(hs)


def test_scan_single_step_is_discretized_input():
    p = _random_params(4, 3, seed=2)
    x = torch.randn(1, 3, dtype=dt)
    torch.testing.assert_close(selective_scan(x, p), _naive(x, p), atol=1e-12, rtol=0)


def test_scan_matches_naive_loop():
    p = _random_params(6, 3, seed=5)
    x = torch.randn(5, 3, dtype=dt)
    torch.testing.assert_close(selective_scan(x, p), _naive(x, p), atol=1e-10, rtol=0)


def test_scan_batched_equals_per_sequence():
    p = _random_params(4, 2, seed=1)
    x = torch.randn(3, 7, 2, dtype=dt)
    out = selective_scan(x, p)
    for i in range(3):
        torch.testing.assert_close(out[i], selective_scan(x[i], p))


# ---------------------------------------------------------------- state head

def test_state_head_constant_from_bias():
    D, din = 3, 2
    b2 = torch.tensor([1.0, -2.0, 0.5])
    o = state_head(torch.randn(D), torch.randn(din), torch.zeros(D, D + din), torch.zeros(D), torch.zeros(D, D), b2)
    torch.testing.assert_close(o, b2)


def test_state_head_linear_identity_sum():
    D = 3
    W1 = torch.cat([torch.eye(D), torch.eye(D)], dim=1)
    h, x = torch.randn(D), torch.randn(D)
    o = state_head(h, x, W1, torch.zeros(D), torch.eye(D), torch.zeros(D), linear=True)
    torch.testing.assert_close(o, h + x)


def test_state_head_formula():
    torch.manual_seed(4)
    D, din = 4, 3
    W1, b1, W2, b2 = torch.randn(D, D + din, dtype=dt), torch.randn(D, dtype=dt), torch.randn(D, D, dtype=dt), torch.randn(D, dtype=dt)
    h, x = torch.randn(D, dtype=dt), torch.randn(din, dtype=dt)
    want = W2 @ torch.clamp(W1 @ torch.cat([h, x]) + b1, min=0) + b2
    torch.testing.assert_close(state_head(h, x, W1, b1, W2, b2), want)


# ---------------------------------------------------------------- full core

@pytest.mark.parametrize("backend", BACKENDS)
def test_core_shapes(backend):
    torch.manual_seed(0)
    core = SSMCore(16, SsmConfig(backend=backend, hidden=256, layers=2))
    pair = run_backbone(torch.randn(12, 16), core)
    assert pair.h_seq.shape == (12, 256) and pair.o_seq.shape == (12, 256)
    pair = core(torch.randn(2, 12, 16))
    assert pair.h_seq.shape == (2, 12, 256)


@pytest.mark.parametrize("backend", BACKENDS)
def test_core_is_causal(backend):
    torch.manual_seed(1)
    core = SSMCore(4, SsmConfig(backend=backend, hidden=8, layers=2)).double()
    x = torch.randn(10, 4, dtype=dt)
    y = x.clone()
    y[6:] += torch.randn(4, 4, dtype=dt)
    a, b = core(x), core(y)
    torch.testing.assert_close(a.h_seq[:6], b.h_seq[:6], atol=0, rtol=0)
    torch.testing.assert_close(a.o_seq[:6], b.o_seq[:6], atol=0, rtol=0)
    assert not torch.allclose(a.h_seq[6:], b.h_seq[6:])


def test_state_head_reads_previous_state():
    torch.manual_seed(2)
    core = SSMCore(4, SsmConfig(backend="GRU", hidden=8, layers=1)).double()
    x = torch.randn(5, 4, dtype=dt)
    pair = core(x)
    h_prev = torch.cat([torch.zeros(1, 8, dtype=dt), pair.h_seq[:-1]])
    torch.testing.assert_close(pair.o_seq, core.head(h_prev, x))


def test_rnn_backend_matches_loop():
    torch.manual_seed(3)
    core = SSMCore(3, SsmConfig(backend="RNN", hidden=5, layers=1)).double()
    x = torch.randn(7, 3, dtype=dt)
    u = core.proj(x)
    r = core.rnn
    h = torch.zeros(5, dtype=dt)
    hs = []
    for t in range(7):
        h = rnn_step(h, u[t], r.weight_hh_l0, r.weight_ih_l0, r.bias_ih_l0 + r.bias_hh_l0)
        hs.append(h)
    torch.testing.assert_close(core(x).h_seq, torch.stack(hs))


def test_core_rejects_nonfinite_and_unknown_backend():
    core = SSMCore(2, SsmConfig(backend="GRU", hidden=4, layers=1))
    with pytest.raises(ValueError):
        run_backbone(torch.tensor([[float("nan"), 0.0]]), core)
    with pytest.raises(ConfigError):
        SsmConfig(backend="Transformer")


@pytest.mark.parametrize("backend", BACKENDS)
def test_core_gradients_match_finite_differences(backend):
    torch.manual_seed(5)
    core = SSMCore(3, SsmConfig(backend=backend, hidden=4, layers=1)).double()
    x = torch.randn(5, 3, dtype=dt, requires_grad=True)

    def f():
        p = core(x)
        return (p.h_seq ** 2).sum() + (p.o_seq * torch.linspace(-1, 1, 4, dtype=dt)).sum()

    params = {"x": x, **{n: p for n, p in core.named_parameters() if p.numel() <= 64}}
    check_grads(f, params)
