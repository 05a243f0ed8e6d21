import math

import numpy as np
import pytest
import torch

from helpers import fd_gradcheck
from promptseg3d.errors import ShapeError
from promptseg3d.fusion import ConcatFusion, CrossModalFusion, FusionParams, fuse
from promptseg3d.text.encoder import TextFeatures


def _params(c, d_t, d_k, seed=0):
    g = torch.Generator().manual_seed(seed)
    return FusionParams(torch.randn(c, d_k, generator=g, dtype=torch.float64),
                        torch.randn(d_t, d_k, generator=g, dtype=torch.float64),
                        torch.randn(d_t, c, generator=g, dtype=torch.float64))


def test_zero_value_projection_is_identity():
    z_i = torch.randn(2, 4, 3, 3, 3)
    p = FusionParams(torch.randn(4, 8), torch.randn(6, 8), torch.zeros(6, 4))
    assert torch.equal(fuse(z_i, torch.randn(2, 6), p), z_i)
    assert torch.equal(fuse(z_i, torch.randn(2, 5, 6), p), z_i)


def test_single_key_adds_broadcast_value():
    z_i = torch.randn(1, 4, 2, 3, 2, dtype=torch.float64)
    z_t = torch.randn(1, 6, dtype=torch.float64)
    p = _params(4, 6, 8)
    out, w = fuse(z_i, z_t, p, return_weights=True)
    assert torch.equal(w, torch.ones_like(w))
    expected = z_i + (z_t @ p.W_v)[:, :, None, None, None]
    assert torch.allclose(out, expected, atol=1e-12, rtol=0)


def test_two_row_hand_computation():
    # c = 2, d_t = 2, d_k = 1, a 1 x 1 x 2 grid and two key/value rows
    z_i = np.array([[1.0, -0.5], [0.25, 2.0]])  # (c, voxels)
    rows = np.array([[0.5, 1.0], [-1.0, 0.3]])  # (S, d_t)
    W_q = np.array([[0.7], [-0.2]])
    W_k = np.array([[1.5], [0.4]])
    W_v = np.array([[0.1, -0.3], [0.6, 0.2]])
    expected = np.zeros_like(z_i)
    for v in range(2):
        q = sum(z_i[ch, v] * W_q[ch, 0] for ch in range(2))
        keys = [sum(rows[s, j] * W_k[j, 0] for j in range(2)) for s in range(2)]
        logits = [q * kk / math.sqrt(1) for kk in keys]
        e = [math.exp(x) for x in logits]
        a = [x / sum(e) for x in e]
        for ch in range(2):
            val = sum(a[s] * sum(rows[s, j] * W_v[j, ch] for j in range(2)) for s in range(2))
            expected[ch, v] = z_i[ch, v] + val
    t = lambda x: torch.tensor(x, dtype=torch.float64)
    out = fuse(t(z_i).view(1, 2, 1, 1, 2), t(rows)[None], FusionParams(t(W_q), t(W_k), t(W_v)))
    assert np.allclose(out.view(2, 2).numpy(), expected, atol=1e-6, rtol=0)


def test_rows_sum_to_one_and_mask_respected():
    z_i = torch.randn(2, 4, 2, 2, 2, dtype=torch.float64)
    rows = torch.randn(2, 5, 6, dtype=torch.float64)
    mask = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
    out, w = fuse(z_i, rows, _params(4, 6, 8), mask=mask, heads=2, return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones(2, 2, 8, dtype=torch.float64), atol=1e-6)
    assert torch.equal(w[0, :, :, 3:], torch.zeros(2, 8, 2, dtype=torch.float64))


def test_flip_equivariance_single_key():
    z_i = torch.randn(1, 4, 3, 4, 5)
    z_t = torch.randn(1, 6)
    p = FusionParams(torch.randn(4, 8), torch.randn(6, 8), torch.randn(6, 4))
    for dim in (2, 3, 4):
        assert torch.allclose(fuse(z_i.flip(dim), z_t, p), fuse(z_i, z_t, p).flip(dim), atol=1e-5)


def test_shape_errors():
    p = FusionParams(torch.randn(4, 8), torch.randn(6, 8), torch.randn(6, 4))
    with pytest.raises(ShapeError):
        fuse(torch.randn(1, 3, 2, 2, 2), torch.randn(1, 6), p)
    with pytest.raises(ShapeError):
        fuse(torch.randn(1, 4, 2, 2, 2), torch.randn(1, 5), p)
    with pytest.raises(ShapeError):
        fuse(torch.randn(1, 4, 2, 2, 2), torch.randn(2, 6), p)


@pytest.mark.parametrize("n_rows", [1, 3])
def test_gradients_match_finite_differences(n_rows):
    torch.manual_seed(1)
    mod = CrossModalFusion(c=4, d_t=4, d_k=4).double()
    z_i = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64)
    rows = torch.randn(1, n_rows, 4, dtype=torch.float64)
    text = TextFeatures(rows.mean(1), rows, torch.ones(1, n_rows, dtype=torch.bool))
    target = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64)
    mod.mode = "tokens"

    def loss():
        return ((mod(z_i, text) - target) ** 2).sum()

    err, grads = fd_gradcheck(loss, [mod.W_q, mod.W_k, mod.W_v], n_entries=16)
    assert err <= 1e-3


def test_module_modes_and_concat():
    torch.manual_seed(0)
    z_i = torch.randn(2, 4, 2, 2, 2)
    rows = torch.randn(2, 3, 6)
    text = TextFeatures(rows.mean(1), rows, torch.ones(2, 3, dtype=torch.bool))
    pooled = CrossModalFusion(4, 6, 8, mode="pooled")
    out = pooled(z_i, text)
    assert out.shape == z_i.shape and torch.equal(pooled.last_weights, torch.ones(2, 1, 8, 1))
    cat = ConcatFusion(4, 6)
    y = cat(z_i, text)
    assert y.shape == (2, 10, 2, 2, 2) and cat.out_channels == 10
    assert torch.equal(y[:, 4:, 1, 0, 1], text.pooled)
