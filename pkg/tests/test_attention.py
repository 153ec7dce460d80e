from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from asv_conformer.attention import (MultiHeadSelfAttention, length_scaled_attention, mhsa_backward,
                                     mhsa_forward, rotary_embed, scaled_dot_attention)
from oracles import fd_grad, gradcheck, projected, rel_err

pytestmark = pytest.mark.usefixtures("float64")


def test_rotary_position_zero_is_identity():
    x = torch.randn(1, 6)
    assert torch.equal(rotary_embed(x), x)


def test_rotary_hand_value():
    # base 1 makes every pair rotate by exactly t radians
    out = rotary_embed(torch.tensor([[0.0, 0.0], [1.0, 0.0]]), base=1.0)
    assert torch.allclose(out[1], torch.tensor([math.cos(1), math.sin(1)]), atol=1e-15)


def test_rotary_rejects_odd_width():
    with pytest.raises(ValueError):
        rotary_embed(torch.randn(3, 5))


def test_rotary_relative_position():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        d = 2 * int(rng.integers(1, 17))
        q, k = torch.randn(1, d), torch.randn(1, d)
        i, j, delta = (int(v) for v in rng.integers(0, 500, 3))
        a = rotary_embed(q, offset=i) @ rotary_embed(k, offset=j).T
        b = rotary_embed(q, offset=i + delta) @ rotary_embed(k, offset=j + delta).T
        worst = max(worst, abs(float(a - b)))
    assert worst < 1e-6


def test_attention_single_row_returns_value():
    v = torch.randn(1, 3)
    assert torch.equal(scaled_dot_attention(torch.randn(1, 3), torch.randn(1, 3), v).values, v)
    assert torch.equal(length_scaled_attention(torch.randn(1, 3), torch.randn(1, 3), v, 2.0).values, v)


def test_identical_keys_average_values():
    v = torch.randn(4, 3)
    k = torch.ones(4, 3)
    out = scaled_dot_attention(torch.randn(4, 3), k, v).values
    assert torch.allclose(out, v.mean(0).expand(4, 3))


def test_two_token_hand_value():
    out = scaled_dot_attention(torch.tensor([[1.0], [0.0]]), torch.tensor([[1.0], [0.0]]),
                               torch.tensor([[10.0], [20.0]])).values
    sig = math.e / (math.e + 1)
    assert float(out[0, 0]) == pytest.approx(10 * sig + 20 * (1 - sig), abs=1e-12)


def test_lsa_reduces_to_plain_attention():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n, d = int(rng.integers(2, 65)), int(rng.integers(1, 17))
        q, k, v = (torch.randn(n, d) for _ in range(3))
        a = length_scaled_attention(q, k, v, math.log(n)).values
        b = scaled_dot_attention(q, k, v).values
        worst = max(worst, float((a - b).abs().max()))
    assert worst < 1e-6


def test_lsa_errors():
    q = torch.randn(3, 2)
    with pytest.raises(ValueError):
        length_scaled_attention(q, q, q, 0.0)
    with pytest.raises(ValueError):
        length_scaled_attention(q, q, q, -1.0)
    with pytest.raises(ValueError):
        scaled_dot_attention(torch.randn(0, 2), torch.randn(0, 2), torch.randn(0, 2))
    with pytest.raises(ValueError):
        scaled_dot_attention(q, torch.randn(4, 2), q)


def _entropy(w):
    return -(w * torch.log(w.clamp_min(1e-300))).sum(-1)


def test_entropy_falls_as_multiplier_grows():
    logits = torch.randn(6, 6)
    prev = None
    for mult in np.linspace(0.0, 5.0, 30):
        h = _entropy(torch.softmax(float(mult) * logits, -1))
        if prev is not None:
            assert torch.all(h <= prev + 1e-12)
        prev = h


def test_mhsa_shapes_and_uniform_case():
    attn = MultiHeadSelfAttention(8, 2)
    assert attn(torch.randn(5, 8)).shape == (5, 8)
    one = MultiHeadSelfAttention(4, 1, rotary=False)
    with torch.no_grad():
        one.w_q.weight.zero_()
        one.w_k.weight.zero_()
        one.w_q.bias.zero_()
        one.w_k.bias.zero_()
        for lin in (one.w_v, one.w_o):
            lin.weight.copy_(torch.eye(4))
            lin.bias.zero_()
    x = torch.randn(6, 4)
    assert torch.allclose(one(x), x.mean(0).expand(6, 4))


def test_temperature_starts_at_log_train_length():
    attn = MultiHeadSelfAttention(8, 2, init_len=74)
    assert float(attn.temperature.detach()) == pytest.approx(math.log(74))
    plain = MultiHeadSelfAttention(8, 2, use_lsa=False)
    plain.load_state_dict({k: v for k, v in attn.state_dict().items() if k != "lsa_log_scale"})
    x = torch.randn(74, 8)
    assert torch.allclose(attn(x), plain(x), atol=1e-12)


@pytest.mark.parametrize("use_lsa", [True, False])
def test_mhsa_gradients_match_finite_differences(use_lsa):
    torch.manual_seed(0)
    attn = MultiHeadSelfAttention(8, 2, use_lsa=use_lsa, init_len=6)
    x = torch.randn(5, 8, requires_grad=True)
    tensors = {"x": x, **dict(attn.named_parameters())}
    errs = gradcheck(projected(lambda: attn(x), torch.empty(5, 8)), tensors)
    assert max(errs.values()) < 1e-4, errs


def test_mhsa_backward_matches_fd_and_is_linear():
    torch.manual_seed(1)
    attn = MultiHeadSelfAttention(4, 2, init_len=10)
    x = torch.randn(2, 4)
    mhsa_forward(x, attn)
    g1, g2 = torch.randn(2, 4), torch.randn(2, 4)
    b1, b2, b12 = mhsa_backward(attn, g1), mhsa_backward(attn, g2), mhsa_backward(attn, g1 + g2)
    for k in b1:
        assert torch.allclose(b12[k], b1[k] + b2[k], atol=1e-8)
    zero = mhsa_backward(attn, torch.zeros(2, 4))
    assert all(float(v.abs().max()) == 0.0 for v in zero.values())

    # d/ds by perturbing s itself, through the log parameterisation
    s0 = float(attn.temperature.detach())

    def loss_at(s):
        with torch.no_grad():
            attn.lsa_log_scale.fill_(math.log(s))
            out = (attn(x) * g1).sum()
            attn.lsa_log_scale.fill_(math.log(s0))
        return float(out)

    h = 1e-5
    numeric = (loss_at(s0 + h) - loss_at(s0 - h)) / (2 * h)
    assert rel_err(np.array([float(b1["lsa_s"])]), np.array([numeric])) < 1e-4

    xx = x.clone()
    numeric_x = fd_grad(lambda: (attn(xx) * g1).sum(), xx, list(range(8)))
    assert rel_err(b1["x"].reshape(-1).numpy(), numeric_x) < 1e-4


def test_mhsa_backward_requires_forward():
    with pytest.raises(RuntimeError):
        mhsa_backward(MultiHeadSelfAttention(4, 2), torch.zeros(2, 4))
