import math

import numpy as np
import pytest
import torch

from worldvol import autoencoder as ae
from worldvol import volume as wv
from worldvol.data import make_dataset
from worldvol.numerics import NonFiniteError


@pytest.fixture(scope="module")
def volumes():
    return [f for s in make_dataset(range(2), n_frames=2, render=False) for f in s.sequence.frames]


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return ae.VolumeAutoencoder(ae.AEConfig()).eval()


def test_encode_shape(model, volumes):
    x = ae.volumes_to_tensor(volumes[:2])
    assert x.shape == (2, 11, 16, 64, 64)
    z = model.encode(x)
    assert z.shape == (2, 8, 16, 16)


def test_decode_shape_and_range(model):
    occ, mp = model.decode(torch.randn(2, 8, 16, 16))
    assert occ.shape == (2, wv.C_OCC, 16, 64, 64)
    assert mp.shape == (2, 4, 64, 64)
    cls = occ.argmax(1)
    assert cls.min() >= 0 and cls.max() < wv.C_OCC


def test_channel_view_matches_volume(volumes):
    x = ae.volumes_to_tensor(volumes[:2])
    assert np.array_equal(x[1].numpy(), volumes[1].channels())


def test_encode_deterministic(model, volumes):
    a = model.encode_volumes(volumes[:1])
    b = model.encode_volumes([wv.volume_from_bytes(wv.volume_to_bytes(volumes[0]))])
    assert torch.equal(a, b)


def test_wrong_dims(model):
    with pytest.raises(ValueError):
        model.encode(torch.zeros(1, 11, 8, 64, 64))
    with pytest.raises(ValueError):
        model.encode(torch.zeros(1, 10, 16, 64, 64))
    with pytest.raises(ValueError):
        model.decode(torch.zeros(1, 8, 1, 16, 16))


# -- quantize ------------------------------------------------------------------------

def _site(*v):
    return torch.tensor(v, dtype=torch.float32).reshape(1, len(v), 1, 1)


BOOK = torch.tensor([[0.0, 0.0], [1.0, 1.0]])


def test_quantize_nearest():
    _, idx, _, _ = ae.quantize(_site(0.4, 0.4), BOOK)
    assert idx.item() == 0


def test_quantize_tie_lowest_index():
    _, idx, _, _ = ae.quantize(_site(0.5, 0.5), BOOK)
    assert idx.item() == 0


def test_quantize_exact_entry_zero_losses():
    zq, idx, commit, book = ae.quantize(_site(1.0, 1.0), BOOK)
    assert idx.item() == 1 and commit.item() == 0 and book.item() == 0
    assert torch.equal(zq, _site(1.0, 1.0))


def test_quantize_idempotent():
    gen = torch.Generator().manual_seed(0)
    book = torch.randn(16, 4, generator=gen)
    z = torch.randn(2, 4, 5, 5, generator=gen)
    zq, idx, _, _ = ae.quantize(z, book)
    zq2, idx2, commit, cb = ae.quantize(zq, book)
    assert torch.equal(zq2, zq) and torch.equal(idx2, idx)
    assert commit.item() == 0 and cb.item() == 0


def test_quantize_brute_force():
    gen = torch.Generator().manual_seed(1)
    book = torch.randn(8, 3, generator=gen, dtype=torch.float64)
    z = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    _, idx, commit, _ = ae.quantize(z, book)
    for i in range(4):
        for j in range(4):
            d = [float(((z[0, :, i, j] - e) ** 2).sum()) for e in book]
            assert idx[0, i, j].item() == int(np.argmin(d))
    ref = ((z - book[idx].permute(0, 3, 1, 2)) ** 2).mean()
    assert commit.item() == pytest.approx(ref.item(), rel=1e-12)


def test_quantize_empty_codebook():
    with pytest.raises(ValueError):
        ae.quantize(_site(0.0, 0.0), torch.zeros(0, 2))


def test_straight_through_gradient():
    gen = torch.Generator().manual_seed(2)
    z = torch.randn(1, 2, 3, 3, generator=gen, requires_grad=True)
    cot = torch.randn(1, 2, 3, 3, generator=gen)
    zq, _, _, _ = ae.quantize(z, torch.randn(4, 2, generator=gen))
    (zq * cot).sum().backward()
    assert torch.equal(z.grad, cot)


def test_codebook_gradient_direction():
    z = _site(0.4, 0.4)
    book = BOOK.clone().requires_grad_(True)
    _, _, _, cb = ae.quantize(z, book)
    cb.backward()
    # the selected code is pulled toward the encoder output, the other is untouched
    assert (book.grad[0] < 0).all() and (book.grad[1] == 0).all()


def test_class_weights_do_not_change_quantization(volumes):
    torch.manual_seed(0)
    m = ae.VolumeAutoencoder()
    occ, mp = ae.volumes_to_arrays(volumes[:2])
    _, _, idx_a = ae.ae_loss(m, occ, mp)
    m.class_weights.copy_(torch.linspace(0.1, 5.0, wv.C_OCC))
    _, _, idx_b = ae.ae_loss(m, occ, mp)
    assert torch.equal(idx_a, idx_b)


# -- losses and training --------------------------------------------------------------

def test_initial_loss_is_uniform_cross_entropy(volumes):
    torch.manual_seed(0)
    m = ae.VolumeAutoencoder()
    _, parts, _ = ae.ae_loss(m, *ae.volumes_to_arrays(volumes[:2]))
    assert parts["ce"] == pytest.approx(math.log(8), abs=1e-5)
    assert math.log(8) == pytest.approx(2.079, abs=1e-3)


def test_blank_maps_zero_map_loss(volumes):
    torch.manual_seed(0)
    m = ae.VolumeAutoencoder(ae.AEConfig(lambda_map=0.0))
    occ, mp = ae.volumes_to_arrays(volumes[:2])
    _, parts, _ = ae.ae_loss(m, occ, torch.zeros_like(mp))
    assert parts["map"] == 0.0


def test_class_frequency_weights():
    occ = torch.tensor([0] * 90 + [1] * 9 + [2] * 1, dtype=torch.uint8)
    w = ae.class_frequency_weights(occ, 0.5).double()
    # absent classes are floored at frequency 1e-6
    freq = torch.tensor([0.9, 0.09, 0.01] + [1e-6] * (wv.C_OCC - 3), dtype=torch.float64)
    assert (w * freq).sum().item() == pytest.approx(1.0, rel=1e-6)
    assert w[2] / w[0] == pytest.approx(math.sqrt(90), rel=1e-5)


def test_single_volume_overfit(volumes):
    cfg = ae.AEConfig(steps=100, batch=1, seed=0)
    _, hist = ae.train_autoencoder(volumes[:1], cfg, log_every=0)
    assert len(hist) == 100
    assert hist[-1] < hist[0]
    assert np.mean(hist[-10:]) < 0.5 * np.mean(hist[:10])


def test_training_deterministic(volumes):
    cfg = ae.AEConfig(steps=5, batch=2, seed=3)
    m1, h1 = ae.train_autoencoder(volumes[:3], cfg, log_every=0)
    m2, h2 = ae.train_autoencoder(volumes[:3], cfg, log_every=0)
    assert h1 == h2
    assert all(torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m2.state_dict().values()))


def test_nan_loss_aborts(volumes):
    torch.manual_seed(0)
    m = ae.VolumeAutoencoder()
    with torch.no_grad():
        m.dec["map"].bias.fill_(float("nan"))
    with pytest.raises(NonFiniteError, match="step 0"):
        ae.train_autoencoder(volumes[:1], ae.AEConfig(steps=2), model=m, log_every=0)


def test_needs_volumes():
    with pytest.raises(ValueError):
        ae.train_autoencoder([], ae.AEConfig(steps=1))


def test_logits_to_volumes_snap_map_to_palette(model):
    occ, mp = model.decode(torch.randn(1, 8, 16, 16))
    v = ae.logits_to_volumes(occ, mp)[0]
    assert {tuple(c) for c in v.map_plane.reshape(-1, 3)} <= set(wv.MAP_PALETTE)
