import math

import numpy as np
import pytest
import torch

from worldvol import numerics as nm


# -- fourier_embed ---------------------------------------------------------------

def test_fourier_zero():
    assert nm.fourier_embed(0.0, 2).tolist() == [0.0, 1.0, 0.0, 1.0]


def test_fourier_half():
    out = nm.fourier_embed(torch.tensor(0.5, dtype=torch.float64), 1)
    assert torch.allclose(out, torch.tensor([1.0, 0.0], dtype=torch.float64), atol=1e-15)


def test_fourier_matches_scalar_math():
    out = nm.fourier_embed(torch.tensor(0.3, dtype=torch.float64), 4)
    ref = []
    for k in range(4):
        w = 2.0 ** k * math.pi
        ref += [math.sin(w * 0.3), math.cos(w * 0.3)]
    assert np.allclose(out.numpy(), ref, rtol=0, atol=1e-14)


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_fourier_rejects_non_finite(bad):
    with pytest.raises(nm.NonFiniteError):
        nm.fourier_embed(bad, 2)


def test_fourier_rejects_zero_freqs():
    with pytest.raises(ValueError):
        nm.fourier_embed(0.0, 0)


# -- group_norm ------------------------------------------------------------------

def _affine(c):
    return torch.ones(c), torch.zeros(c)


def test_group_norm_constant_input():
    x = torch.full((2, 4, 3, 3), 7.0)
    assert torch.equal(nm.group_norm(x, 2, *_affine(4)), torch.zeros_like(x))


def test_group_norm_zero_scale_gives_shift():
    x = torch.randn(2, 4, 3, 3)
    b = torch.tensor([1.0, -2.0, 0.5, 3.0])
    out = nm.group_norm(x, 2, torch.zeros(4), b)
    assert torch.equal(out, b[None, :, None, None].expand_as(out))


def test_group_norm_moments(gen):
    x = torch.randn(2, 8, 4, 4, generator=gen)
    out = nm.group_norm(x, 2, *_affine(8)).double().reshape(2, 2, -1)
    assert out.mean(-1).abs().max() < 1e-5
    assert (out.var(-1, unbiased=False) - 1).abs().max() < 1e-4


def test_group_norm_indivisible():
    with pytest.raises(ValueError):
        nm.group_norm(torch.zeros(1, 6, 2, 2), 4, *_affine(6))


def test_group_norm_affine_invariance(gen):
    # large group variance keeps eps / var small enough for the 1e-5 tolerance
    x = torch.randn(3, 8, 5, 5, generator=gen, dtype=torch.float64) * 10
    a = torch.rand(3, 2, generator=gen, dtype=torch.float64) * 1.5 + 0.5
    b = torch.randn(3, 2, generator=gen, dtype=torch.float64) * 4
    xt = (x.reshape(3, 2, -1) * a[..., None] + b[..., None]).reshape_as(x)
    ones, zeros = torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64)
    diff = nm.group_norm(xt, 2, ones, zeros) - nm.group_norm(x, 2, ones, zeros)
    assert diff.abs().max() < 1e-5


# -- attention -------------------------------------------------------------------

def _attn_params(c, gen, cin=None):
    cin = cin or c
    return [torch.randn(c, c if i in (0, 3) else cin, generator=gen, dtype=torch.float64) * 0.5
            for i in range(4)] + [torch.randn(c, generator=gen, dtype=torch.float64)]


def test_attention_single_key_returns_projected_value(gen):
    wq, wk, wv, wo, bo = _attn_params(4, gen)
    q = torch.randn(2, 5, 4, generator=gen, dtype=torch.float64)
    kv = torch.randn(2, 1, 4, generator=gen, dtype=torch.float64)
    out = nm.attention(q, kv, 2, wq, wk, wv, wo, bo)
    ref = (kv @ wv.t()) @ wo.t() + bo
    assert torch.allclose(out, ref.expand_as(out), atol=1e-12)
    w = nm.attention_weights(q @ wq.t(), kv @ wk.t())
    assert torch.equal(w, torch.ones_like(w))


def test_attention_identical_keys_uniform(gen):
    q = torch.randn(1, 6, 8, generator=gen)
    k = torch.randn(1, 1, 8, generator=gen).expand(1, 5, 8)
    w = nm.attention_weights(q, k)
    assert torch.allclose(w, torch.full_like(w, 0.2), atol=1e-7)


def test_attention_scalar_loop_oracle(gen):
    wq, wk, wv, wo, bo = _attn_params(4, gen)
    x = torch.randn(1, 3, 4, generator=gen, dtype=torch.float64)
    out = nm.attention(x, x, 2, wq, wk, wv, wo, bo)
    xs = x[0].tolist()
    W = [w.tolist() for w in (wq, wk, wv, wo)]

    def mat(w, v):
        return [sum(w[i][j] * v[j] for j in range(len(v))) for i in range(len(w))]

    q = [mat(W[0], r) for r in xs]
    k = [mat(W[1], r) for r in xs]
    v = [mat(W[2], r) for r in xs]
    dh = 2
    for i in range(3):
        cat = []
        for h in range(2):
            sl = slice(h * dh, (h + 1) * dh)
            logits = [sum(a * b for a, b in zip(q[i][sl], k[j][sl])) / math.sqrt(dh) for j in range(3)]
            m = max(logits)
            e = [math.exp(t - m) for t in logits]
            s = sum(e)
            cat += [sum(e[j] / s * v[j][sl][d] for j in range(3)) for d in range(dh)]
        ref = [a + b for a, b in zip(mat(W[3], cat), bo.tolist())]
        assert np.allclose(out[0, i].numpy(), ref, atol=1e-12)


def test_attention_permutations(gen):
    wq, wk, wv, wo, bo = (p.float() for p in _attn_params(8, gen))
    q = torch.randn(2, 7, 8, generator=gen)
    kv = torch.randn(2, 5, 8, generator=gen)
    base = nm.attention(q, kv, 4, wq, wk, wv, wo, bo)
    pq, pk = torch.randperm(7, generator=gen), torch.randperm(5, generator=gen)
    assert (nm.attention(q[:, pq], kv, 4, wq, wk, wv, wo, bo) - base[:, pq]).abs().max() <= 1e-6
    assert (nm.attention(q, kv[:, pk], 4, wq, wk, wv, wo, bo) - base).abs().max() <= 1e-6


def test_attention_rowwise_modes_agree(gen):
    wq, wk, wv, wo, bo = (p.float() for p in _attn_params(8, gen))
    q = torch.randn(2, 7, 8, generator=gen)
    kv = torch.randn(2, 5, 8, generator=gen)
    base = nm.attention(q, kv, 4, wq, wk, wv, wo, bo)
    for mode in ("context", "all"):
        assert torch.allclose(nm.attention(q, kv, 4, wq, wk, wv, wo, bo, mode), base, atol=1e-5)
    with pytest.raises(ValueError):
        nm.attention(q, kv, 4, wq, wk, wv, wo, bo, "rows")


def test_attention_rowwise_is_batch_invariant(gen):
    lin = nm.RowLinear(16, 16)
    x = torch.randn(9, 16, generator=gen)
    full = lin(x)
    assert all(torch.equal(lin(x[i:i + 1]), full[i:i + 1]) for i in range(9))


def test_attention_bad_channels(gen):
    wq, wk, wv, wo, bo = _attn_params(4, gen)
    with pytest.raises(ValueError):
        nm.attention(torch.zeros(1, 2, 4, dtype=torch.float64), torch.zeros(1, 2, 3, dtype=torch.float64),
                     2, wq, wk, wv, wo, bo)
    with pytest.raises(ValueError):
        nm.attention(torch.zeros(1, 2, 4, dtype=torch.float64), torch.zeros(1, 2, 4, dtype=torch.float64),
                     3, wq, wk, wv, wo, bo)


# -- conv2d ----------------------------------------------------------------------

def test_conv_identity(gen):
    x = torch.randn(2, 3, 5, 6, generator=gen)
    k = torch.eye(3)[:, :, None, None]
    assert torch.equal(nm.conv2d(x, k), x)


def test_conv_ones():
    out = nm.conv2d(torch.ones(1, 1, 3, 3), torch.ones(1, 1, 3, 3))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


def test_conv_loop_oracle(gen):
    x = torch.randn(1, 2, 5, 5, generator=gen, dtype=torch.float64)
    k = torch.randn(3, 2, 3, 3, generator=gen, dtype=torch.float64)
    out = nm.conv2d(x, k, padding=1)
    xp = np.pad(x.numpy(), ((0, 0), (0, 0), (1, 1), (1, 1)))
    kn = k.numpy()
    ref = np.zeros((1, 3, 5, 5))
    for n in range(1):
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    for c in range(2):
                        for a in range(3):
                            for b in range(3):
                                ref[n, o, i, j] += xp[n, c, i + a, j + b] * kn[o, c, a, b]
    assert np.abs(out.numpy() - ref).max() <= 1e-6


@pytest.mark.parametrize("h,stride,pad", [(8, 2, 1), (7, 2, 1), (9, 1, 1), (6, 1, 0)])
def test_conv_extent(h, stride, pad):
    out = nm.conv2d(torch.zeros(1, 1, h, h), torch.zeros(1, 1, 3, 3), stride=stride, padding=pad)
    assert out.shape[-1] == (h + 2 * pad - 3) // stride + 1


def test_conv_errors():
    with pytest.raises(ValueError):
        nm.conv2d(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2))
    with pytest.raises(ValueError):
        nm.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 1, 3, 3))


# -- trilinear_sample ------------------------------------------------------------

def _trilinear_oracle(vol, p):
    c, zd, hd, wd = vol.shape
    z, y, x = p
    if not (0 <= z <= zd - 1 and 0 <= y <= hd - 1 and 0 <= x <= wd - 1):
        return np.zeros(c)
    out = np.zeros(c)
    for iz in range(zd):
        for iy in range(hd):
            for ix in range(wd):
                w = max(0, 1 - abs(z - iz)) * max(0, 1 - abs(y - iy)) * max(0, 1 - abs(x - ix))
                out += w * vol[:, iz, iy, ix]
    return out


def test_trilinear_voxel_centre(gen):
    vol = torch.randn(3, 4, 5, 6, generator=gen)
    out = nm.trilinear_sample(vol, torch.tensor([[2.0, 3.0, 4.0], [3.0, 4.0, 5.0], [0.0, 0.0, 0.0]]))
    assert torch.equal(out[0], vol[:, 2, 3, 4])
    assert torch.equal(out[1], vol[:, 3, 4, 5])
    assert torch.equal(out[2], vol[:, 0, 0, 0])


def test_trilinear_midpoint(gen):
    vol = torch.randn(2, 3, 3, 3, generator=gen, dtype=torch.float64)
    out = nm.trilinear_sample(vol, torch.tensor([[1.0, 1.5, 1.0]], dtype=torch.float64))
    assert torch.allclose(out[0], (vol[:, 1, 1, 1] + vol[:, 1, 2, 1]) / 2, atol=1e-15)


def test_trilinear_out_of_bounds(gen):
    vol = torch.randn(2, 3, 3, 3, generator=gen)
    pts = torch.tensor([[-1.0, -1.0, -1.0], [0.0, 0.0, 2.01], [3.0, 0.0, 0.0]])
    assert torch.equal(nm.trilinear_sample(vol, pts), torch.zeros(3, 2))


def test_trilinear_random_oracle(gen):
    vol = torch.randn(2, 3, 4, 5, generator=gen, dtype=torch.float64)
    pts = torch.rand(50, 3, generator=gen, dtype=torch.float64) * torch.tensor([3.0, 4.0, 5.0]) - 0.25
    out = nm.trilinear_sample(vol, pts).numpy()
    for i in range(50):
        assert np.allclose(out[i], _trilinear_oracle(vol.numpy(), pts[i].tolist()), atol=1e-12)


# -- backward ----------------------------------------------------------------------

def test_backward_sum(gen):
    x = torch.randn(3, 4, generator=gen, requires_grad=True)
    nm.backward(x.sum())
    assert torch.equal(x.grad, torch.ones(3, 4))


def test_backward_square(gen):
    x = torch.randn(3, 4, generator=gen, requires_grad=True)
    nm.backward((x * x).sum())
    assert torch.equal(x.grad, 2 * x.detach())


def test_backward_accumulates(gen):
    x = torch.randn(5, generator=gen, requires_grad=True)
    nm.backward(x.sum())
    nm.backward(x.sum())
    assert torch.equal(x.grad, torch.full((5,), 2.0))


def test_backward_non_scalar():
    with pytest.raises(ValueError):
        nm.backward(torch.ones(2, requires_grad=True) * 2)


def test_backward_non_finite_loss():
    with pytest.raises(nm.NonFiniteError):
        nm.backward(torch.tensor(float("nan"), requires_grad=True) * 1)


def test_finite_difference_catches_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x * x

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * x            # missing factor 2

    assert nm.finite_difference_check(Wrong.apply, [torch.randn(6)]) > 0.1
    assert nm.finite_difference_check(lambda x: x * x, [torch.randn(6)]) < 1e-6


def test_ops_deterministic(gen):
    vol = torch.randn(4, 3, 5, 5, generator=gen)
    pts = torch.rand(20, 3, generator=gen) * 4
    x = torch.randn(2, 8, 6, 6, generator=gen)
    k = torch.randn(8, 8, 3, 3, generator=gen)
    att = nm.Attention(8, 2)
    for fn in (lambda: nm.trilinear_sample(vol, pts), lambda: nm.conv2d(x, k, padding=1),
               lambda: nm.group_norm(x, 4, *_affine(8)), lambda: att(x.flatten(2).transpose(1, 2))):
        assert torch.equal(fn(), fn())
