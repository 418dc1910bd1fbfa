import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hst.config import QuantizerConfig
from hst.hquant import (
    Codebook, HierarchicalQuantizer, cluster_revive_update, codebook_metrics, nearest_assign, quantize_pair,
    residual_assign, revival_weight,
)

dt = torch.float64


def _cb(vectors, gamma=0.99, pin_zero=False, role="state"):
    v = torch.as_tensor(vectors, dtype=dt)
    cb = Codebook(v.shape[0], v.shape[1], role, gamma, pin_zero).double()
    with torch.no_grad():
        cb.vectors.copy_(v)
    return cb


# ---------------------------------------------------------------- assignment

def test_assign_worked_example():
    codes = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    z = torch.tensor([[0.9, 0.1], [0.1, 1.5], [-0.2, -0.1]])
    idx, q = nearest_assign(z, codes)
    assert idx.tolist() == [1, 2, 0]
    torch.testing.assert_close(q, codes[[1, 2, 0]])


def test_assign_tie_goes_to_lowest_index():
    codes = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    idx, _ = nearest_assign(torch.zeros(1, 2), codes)
    assert idx.item() == 0


def test_assign_matches_bruteforce_numpy(rng):
    z = rng.standard_normal((1000, 16))
    codes = rng.standard_normal((32, 16))
    idx, _ = nearest_assign(torch.as_tensor(z), torch.as_tensor(codes))
    d = ((z[:, None, :] - codes[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(idx.numpy(), d.argmin(1))


def test_assign_rejects_bad_input():
    with pytest.raises(ValueError, match="width"):
        nearest_assign(torch.zeros(3, 4), torch.zeros(2, 5))
    with pytest.raises(ValueError, match="non-finite"):
        nearest_assign(torch.tensor([[float("inf"), 0.0]]), torch.zeros(2, 2))


def test_assign_gradient_reaches_codebook_only():
    cb = _cb([[0.0, 0.0], [1.0, 1.0]])
    z = torch.tensor([[0.9, 0.8]], dtype=dt, requires_grad=True)
    _, q = nearest_assign(z, cb)
    q.sum().backward()
    assert z.grad is None
    torch.testing.assert_close(cb.vectors.grad, torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=dt))


def test_residual_cases():
    first = torch.tensor([[1.0, 1.0]])
    res_codes = torch.tensor([[0.0, 0.0], [0.5, 0.0], [0.0, -0.5]])
    idx, eps = residual_assign(torch.tensor([[1.0, 1.0]]), first, res_codes)
    assert idx.item() == 0 and torch.equal(eps, torch.zeros(1, 2))
    idx, eps = residual_assign(torch.tensor([[1.6, 1.0]]), first, res_codes)
    assert idx.item() == 1
    idx, _ = residual_assign(torch.tensor([[1.0, 0.4]]), first, res_codes)
    assert idx.item() == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(-6, 6))
def test_assign_scale_equivariant(seed, power):
    g = torch.Generator().manual_seed(seed)
    z, codes = torch.randn(20, 3, generator=g, dtype=dt), torch.randn(5, 3, generator=g, dtype=dt)
    c = 2.0 ** power  # exact in floating point
    a, _ = nearest_assign(z, codes)
    b, _ = nearest_assign(c * z, c * codes)
    assert torch.equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_moving_toward_code_keeps_it_nearest(seed, t):
    g = torch.Generator().manual_seed(seed)
    z, codes = torch.randn(10, 3, generator=g, dtype=dt), torch.randn(6, 3, generator=g, dtype=dt)
    idx, q = nearest_assign(z, codes)
    z2 = z + t * (q - z)
    d = ((z2[:, None] - codes[None]) ** 2).sum(-1)
    own = ((z2 - q) ** 2).sum(-1)
    assert torch.all(own <= d.min(1).values + 1e-12)


# ---------------------------------------------------------------- revival

def test_count_update_arithmetic():
    cb = _cb(np.eye(4, 2), gamma=0.99)
    cb.counts.fill_(10.0)
    assignments = torch.tensor([0, 0, 1])
    cluster_revive_update(cb, torch.zeros(3, 2, dtype=dt), assignments)
    assert cb.counts[0].item() == pytest.approx(9.92, abs=1e-12)   # 0.99*10 + 0.01*2
    assert cb.counts[1].item() == pytest.approx(9.91, abs=1e-12)
    assert cb.counts[2].item() == pytest.approx(9.90, abs=1e-12)


def test_unused_code_fully_revived():
    cb = _cb([[0.0, 0.0], [5.0, 5.0]])
    feats = torch.tensor([[0.1, 0.0], [1.0, 2.0], [-0.1, 0.1]], dtype=dt)
    # counts stay 0, so alpha = exp(0) = 1 and every code jumps to its nearest feature
    cluster_revive_update(cb, feats, torch.tensor([0, 0, 0]))
    torch.testing.assert_close(cb.vectors.data[1], feats[1])
    assert revival_weight(0.0, 2, 0.99) == 1.0


def test_busy_code_frozen():
    cb = _cb(np.eye(8, 3) * 3, gamma=0.99)
    cb.counts.fill_(1.0)
    before = cb.vectors.detach().clone()
    feats = torch.randn(8, 3, dtype=dt)
    cluster_revive_update(cb, feats, torch.arange(8))  # n_j = 1 keeps N_j = 1
    torch.testing.assert_close(cb.counts, torch.ones(8, dtype=dt))
    assert revival_weight(1.0, 8, 0.99) == math.exp(-8000) == 0.0
    assert torch.equal(cb.vectors.data, before)


def test_revival_partial_weight_oracle():
    K, gamma = 2, 0.5
    cb = _cb([[0.0], [4.0]], gamma=gamma)
    cb.counts.copy_(torch.tensor([0.2, 0.0], dtype=dt))
    feats = torch.tensor([[1.0], [3.0]], dtype=dt)
    cluster_revive_update(cb, feats, torch.tensor([0, 0]))
    N0 = 0.5 * 0.2 + 0.5 * 2
    a0 = math.exp(-N0 * K * 10 / (1 - gamma))
    assert cb.vectors.data[0, 0].item() == pytest.approx(a0 * 1.0, abs=1e-15)
    assert cb.vectors.data[1, 0].item() == pytest.approx(3.0)


def test_pinned_zero_code_survives_revival():
    cb = _cb([[0.0, 0.0], [2.0, 2.0]], pin_zero=True, role="state_residual")
    cluster_revive_update(cb, torch.tensor([[1.0, 1.0]], dtype=dt), torch.tensor([1]))
    assert torch.equal(cb.vectors.data[0], torch.zeros(2, dtype=dt))


# ---------------------------------------------------------------- metrics

def test_metrics_uniform_and_collapsed():
    m = codebook_metrics(np.arange(8).repeat(5), 8)
    assert m["perplexity"] == pytest.approx(8.0) and m["dead_codes"] == 0
    m = codebook_metrics(np.zeros(40, dtype=int), 8)
    assert m["perplexity"] == pytest.approx(1.0) and m["dead_codes"] == 7


def test_metrics_ignore_flat_placeholders():
    m = codebook_metrics(np.full(10, -1), 4)
    assert m["dead_codes"] == 4 and math.isnan(m["perplexity"])


# ---------------------------------------------------------------- quantizer

def _quantizer(mode="hierarchical", literal=False, D=3):
    torch.manual_seed(0)
    q = HierarchicalQuantizer(D, QuantizerConfig(state_codes=4, transition_codes=4, mode=mode,
                                                 literal_transition_residual=literal)).double()
    o, h = torch.randn(50, D, dtype=dt), torch.randn(50, D, dtype=dt)
    q.init_from_features(o, h, seed=1)
    return q, o, h


def test_quantize_pair_recombination():
    q, o, h = _quantizer()
    tok = q(o, h)
    torch.testing.assert_close(tok.quantized_states, tok.o_hat + tok.eps_o)
    torch.testing.assert_close(tok.quantized_transitions, tok.h_hat + tok.eps_h)
    # residual stage never makes the approximation worse (zero code available)
    assert torch.all(((o - tok.quantized_states) ** 2).sum(-1) <= ((o - tok.o_hat) ** 2).sum(-1) + 1e-12)


def test_flat_mode_skips_residuals():
    q, o, h = _quantizer("flat")
    tok = q(o, h)
    assert torch.all(tok.state_residual_tokens == -1)
    assert torch.equal(tok.eps_h, torch.zeros_like(tok.eps_h))


def test_literal_mode_shares_residual_book():
    q, o, h = _quantizer(literal=True)
    tok = q(o, h)
    codes = q["state_residual"].vectors
    torch.testing.assert_close(tok.eps_h, codes[tok.transition_residual_tokens])


def test_init_seeds_from_features_and_pins():
    q, o, h = _quantizer()
    assert bool(q.initialized)
    for role in ("state_residual", "transition_residual"):
        assert torch.equal(q[role].vectors.data[0], torch.zeros(3, dtype=dt))
    # k-means++ centres are data points
    d = ((q["state"].vectors.data[:, None] - o[None]) ** 2).sum(-1).min(1).values
    assert torch.all(d < 1e-20)


def test_quantize_pair_width_mismatch():
    books = {r: torch.zeros(2, 3) for r in ("state", "transition", "state_residual", "transition_residual")}
    with pytest.raises(ValueError):
        quantize_pair(torch.zeros(4, 5), torch.zeros(4, 5), books)
