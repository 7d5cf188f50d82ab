import dataclasses
import math

import numpy as np
import pytest
import torch

from worldvol import diffusion as df
from worldvol import world_model as wm
from worldvol import volume as wv
from worldvol.autoencoder import VolumeAutoencoder
from worldvol.blocks import frames_to_time, from_tokens, time_to_frames, to_tokens


# -- schedule ----------------------------------------------------------------------------

def test_constant_beta_product():
    s = df.schedule_from_betas([0.1, 0.1])
    assert s.alpha_bar[2].item() == pytest.approx(0.81, abs=1e-15)


def test_alpha_bar_zero_is_clean():
    assert df.make_schedule().alpha_bar[0].item() == 1.0


@pytest.mark.parametrize("beta_1,beta_T", [(1e-4, 0.02), (1e-3, 0.2)])
def test_alpha_bar_running_product(beta_1, beta_T):
    s = df.make_schedule(100, beta_1, beta_T)
    prod = 1.0
    for i in range(100):
        prod *= 1 - (beta_1 + (beta_T - beta_1) * i / 99)
    assert abs(s.alpha_bar[100].item() - prod) < 1e-10


def test_schedule_invariants():
    s = df.make_schedule()
    b, ab = s.betas[1:], s.alpha_bar[1:]
    assert (b > 0).all() and (b < 1).all() and (b[1:] > b[:-1]).all()
    assert (ab > 0).all() and (ab < 1).all() and (ab[1:] < ab[:-1]).all()
    assert ab[-1] < 1e-4
    tau = torch.arange(2, 101)
    ref = (1 - s.alpha_bar[tau - 1]) / (1 - s.alpha_bar[tau]) * s.betas[tau]
    assert torch.allclose(s.posterior_var[2:], ref, rtol=0, atol=1e-15)
    assert s.posterior_var[1] == 0


@pytest.mark.parametrize("args", [(0, 1e-3, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 1e-3, 1.0)])
def test_schedule_rejects(args):
    with pytest.raises(ValueError):
        df.make_schedule(*args)


# -- q_sample ------------------------------------------------------------------------------

def test_q_sample_zero_noise():
    s = df.make_schedule()
    z0 = torch.randn(4, 3, dtype=torch.float64)
    out = df.q_sample(s, z0, 30, torch.zeros_like(z0))
    assert torch.allclose(out, s.alpha_bar[30].sqrt() * z0, rtol=0, atol=1e-15)


def test_q_sample_zero_data():
    s = df.make_schedule()
    eps = torch.randn(4, 3, dtype=torch.float64)
    out = df.q_sample(s, torch.zeros_like(eps), 30, eps)
    assert torch.allclose(out, (1 - s.alpha_bar[30]).sqrt() * eps, rtol=0, atol=1e-15)


def test_q_sample_per_sample_steps():
    s = df.make_schedule()
    z0, eps = torch.randn(3, 2, 2, dtype=torch.float64), torch.randn(3, 2, 2, dtype=torch.float64)
    tau = torch.tensor([1, 50, 100])
    out = df.q_sample(s, z0, tau, eps)
    for i in range(3):
        assert torch.equal(out[i], df.q_sample(s, z0[i], int(tau[i]), eps[i]))


def test_q_sample_monte_carlo_variance():
    s = df.schedule_from_betas([0.19])
    assert s.alpha_bar[1].item() == pytest.approx(0.81)
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(100_000, generator=gen, dtype=torch.float64)
    z = df.q_sample(s, torch.zeros_like(eps), 1, eps)
    assert z.var().item() == pytest.approx(0.19, rel=0.02)


def test_q_sample_final_step_variance():
    s = df.make_schedule()
    gen = torch.Generator().manual_seed(1)
    z0 = torch.randn(100_000, generator=gen, dtype=torch.float64) * 0.5 + 2.0
    z = df.q_sample(s, z0, s.T, torch.randn(100_000, generator=gen, dtype=torch.float64))
    assert z.var().item() == pytest.approx(1.0, rel=0.03)
    assert abs(z.mean().item()) < 0.02


@pytest.mark.parametrize("tau", [0, 101])
def test_q_sample_range(tau):
    with pytest.raises(ValueError):
        df.q_sample(df.make_schedule(), torch.zeros(2), tau, torch.zeros(2))


# -- ancestral sampling ------------------------------------------------------------------

def _optimal_predictor(s, mu, sigma):
    def predict(z, tau):
        ab = s.alpha_bar[tau].item()
        return (z - math.sqrt(ab) * mu) * math.sqrt(1 - ab) / (ab * sigma ** 2 + 1 - ab)
    return predict


def _chain_moments(s, mu, sigma):
    """Exact mean and variance of the ancestral chain driven by the optimal predictor.

    Every step is affine in z plus independent Gaussian noise, so the moments
    propagate in closed form.
    """
    m, v = 0.0, 1.0
    for tau in range(s.T, 0, -1):
        b, ab = s.betas[tau].item(), s.alpha_bar[tau].item()
        k = math.sqrt(1 - ab) / (ab * sigma ** 2 + 1 - ab)
        c = b / math.sqrt(1 - ab)
        scale = (1 - c * k) / math.sqrt(1 - b)
        shift = c * k * math.sqrt(ab) * mu / math.sqrt(1 - b)
        m, v = scale * m + shift, scale ** 2 * v
        if tau > 1:
            v += s.posterior_var[tau].item()
    return m, v


@pytest.mark.parametrize("mu,sigma", [(2.0, 0.25), (-1.0, 0.5), (0.5, 1.0), (1.0, 2.0)])
def test_sampler_matches_exact_chain_moments(mu, sigma):
    s = df.make_schedule()
    x = df.sample(s, _optimal_predictor(s, mu, sigma), (20_000,), torch.Generator().manual_seed(3),
                  dtype=torch.float64)
    m, v = _chain_moments(s, mu, sigma)
    se = math.sqrt(v / 20_000)
    assert abs(x.mean().item() - m) < 4 * se
    assert x.std().item() == pytest.approx(math.sqrt(v), rel=0.02)


def test_sampler_visits_each_step_once():
    s = df.make_schedule()
    trace = []
    df.sample(s, lambda z, t: torch.zeros_like(z), (2,), torch.Generator().manual_seed(0), trace=trace)
    assert trace == list(range(100, 0, -1))


def test_sampler_single_step_adds_no_noise():
    s = df.schedule_from_betas([0.5])
    draws = []

    def noise(tau):
        draws.append(tau)
        return torch.ones(3)

    out = df.sample(s, lambda z, t: torch.zeros_like(z), (3,), None, noise=noise)
    assert draws == [2]
    assert torch.allclose(out, torch.full((3,), 1 / math.sqrt(0.5)))


def test_sampler_deterministic():
    s = df.make_schedule()
    pred = _optimal_predictor(s, 1.0, 1.0)
    a = df.sample(s, pred, (50,), torch.Generator().manual_seed(5))
    b = df.sample(s, pred, (50,), torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_epsilon_loss_perfect_and_zero_predictors():
    s = df.make_schedule()
    z0 = torch.randn(4096, 4, generator=torch.Generator().manual_seed(0))

    def perfect(zt, tau):
        ab = s.alpha_bar[tau].float()[:, None]
        return (zt - ab.sqrt() * z0) / (1 - ab).sqrt()

    assert df.epsilon_loss(perfect, s, z0, torch.Generator().manual_seed(1)).item() < 1e-8
    zero = df.epsilon_loss(lambda zt, tau: torch.zeros_like(zt), s, z0, torch.Generator().manual_seed(1))
    assert zero.item() == pytest.approx(1.0, rel=0.03)


# -- blocks --------------------------------------------------------------------------------

def test_rearrange_round_trips():
    x = torch.randn(6, 5, 4, 3)
    assert torch.equal(from_tokens(to_tokens(x), 4, 3), x)
    t = to_tokens(x)
    assert torch.equal(time_to_frames(frames_to_time(t, 3), 3, 12), t)
    # (b n) layout: frame j of sample i sits at row i * n + j
    tt = frames_to_time(t, 3)
    assert torch.equal(tt[5, 2], t[2, 5])


def _block(seed=0):
    torch.manual_seed(seed)
    return wm.STBlock(16, 12, heads=4).eval()


def test_st_block_single_frame_temporal_noop_at_init():
    blk = _block()
    z, tok = torch.randn(2, 16, 4, 4), torch.randn(2, 6, 12)
    assert torch.equal(blk(z, tok, 1, temporal=True), blk(z, tok, 1, temporal=False))


def test_temporal_single_frame_is_value_projection():
    torch.manual_seed(0)
    blk = _block()
    with torch.no_grad():
        for p in blk.temporal.attn.to_out.parameters():
            p.normal_()
    x = torch.randn(3, 10, 16, dtype=torch.float32)
    attn = blk.temporal.attn
    t = frames_to_time(x, 1)                       # one-frame sequences per site
    ref = time_to_frames(t + attn.to_out(attn.to_v(blk.temporal.norm(t))), 1, 10)
    assert torch.allclose(blk.temporal(x, 1), ref, atol=1e-5)


def test_st_block_zero_outputs_is_identity():
    blk = _block()
    with torch.no_grad():
        for m in (blk.spatial.to_out, blk.action.to_out, blk.ff.out):
            m.weight.zero_()
            m.bias.zero_()
    z, tok = torch.randn(6, 16, 4, 4), torch.randn(6, 6, 12)
    assert torch.equal(blk(z, tok, 3), z)


def test_st_block_frame_count_check():
    with pytest.raises(ValueError):
        _block()(torch.randn(5, 16, 2, 2), torch.randn(5, 6, 12), 3)


def test_temporal_attention_mixes_frames_only_within_sample():
    blk = _block()
    with torch.no_grad():
        for p in blk.temporal.attn.to_out.parameters():
            p.normal_()
    x = torch.randn(6, 4, 16)
    y = blk.temporal(x, 3)
    x2 = x.clone()
    x2[4] += 1.0                      # sample 1, frame 1
    y2 = blk.temporal(x2, 3)
    assert torch.equal(y2[:3], y[:3])
    assert not torch.equal(y2[3], y[3])


# -- noise predictor -------------------------------------------------------------------------

CFG = wm.WMConfig(width=16, deep_width=32, token_dim=32)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    n = wm.WorldNoisePredictor(CFG)
    with torch.no_grad():
        n.conv_out.weight.normal_(0, 0.05)
    return n.eval()


def _inputs(b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(b, 3, 8, 16, 16, generator=g), torch.randint(1, 101, (b,), generator=g),
            torch.randn(b, 3, 8, 16, 16, generator=g), torch.rand(b, 3, 2, generator=g) * 5)


def test_predictor_shape(net):
    out = net(*_inputs())
    assert out.shape == (2, 3, 8, 16, 16)
    assert net.conv_in.in_channels == 8 * (1 + 3)


def test_predictor_batch_permutation(net):
    z, tau, past, act = _inputs(3)
    out = net(z, tau, past, act)
    p = torch.tensor([2, 0, 1])
    assert torch.allclose(net(z[p], tau[p], past[p], act[p]), out[p], atol=1e-6)


def test_predictor_frame_count_mismatch(net):
    z, tau, past, act = _inputs()
    with pytest.raises(ValueError):
        net(z[:, :2], tau, past, act)
    with pytest.raises(ValueError):
        net(z, tau, past[:, :2], act[:, :2])


def test_action_tokens_count():
    enc = wm.ActionEncoder(3, 8, 32)
    assert enc(torch.rand(2, 3, 2)).shape == (2, 6, 32)


def test_action_tokens_depend_on_actions():
    torch.manual_seed(0)
    enc = wm.ActionEncoder(3, 8, 32)
    a = torch.rand(1, 3, 2)
    b = a.clone()
    b[0, 1, 1] += 0.1
    assert not torch.allclose(enc(a), enc(b))


def test_untrained_loss_near_one():
    torch.manual_seed(0)
    n = wm.WorldNoisePredictor(dataclasses.replace(CFG, prediction="eps"))
    s = df.make_schedule()
    z, _, past, act = _inputs(8)
    loss = wm.denoising_loss(n, s, past, act, z, torch.Generator().manual_seed(0))
    assert loss.item() == pytest.approx(1.0, rel=0.05)


def test_untrained_v_losses_match_closed_form():
    # zero output: v-MSE is mean (a * eps - s * x0)^2 and the noise estimate is s * z_tau
    torch.manual_seed(0)
    n = wm.WorldNoisePredictor(CFG)
    sched = df.make_schedule()
    z, _, past, act = _inputs(8)
    v_loss = wm.denoising_loss(n, sched, past, act, z, torch.Generator().manual_seed(0))
    noise_loss = wm.denoising_loss(n, sched, past, act, z, torch.Generator().manual_seed(0), noise_mse=True)
    gen = torch.Generator().manual_seed(0)
    tau = torch.randint(1, sched.T + 1, (8,), generator=gen)
    eps = torch.randn(z.shape, generator=gen).double()
    ab = sched.alpha_bar[tau].double().reshape(-1, 1, 1, 1, 1)
    a, s = ab.sqrt(), (1 - ab).sqrt()
    zt = a * z.double() + s * eps
    assert v_loss.item() == pytest.approx(((a * eps - s * z.double()) ** 2).mean().item(), rel=1e-5)
    assert noise_loss.item() == pytest.approx(((s * zt - eps) ** 2).mean().item(), rel=1e-5)


def test_v_target_converts_to_exact_noise():
    sched = df.make_schedule()
    n = wm.WorldNoisePredictor(CFG)
    g = torch.Generator().manual_seed(3)
    x0 = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    tau = torch.tensor([1, 100])
    zt = df.q_sample(sched, x0, tau, eps)
    ab = sched.alpha_bar[tau].double().reshape(-1, 1, 1)
    v = ab.sqrt() * eps - (1 - ab).sqrt() * x0
    assert torch.allclose(wm.noise_estimate(n, sched, v, zt, tau), eps, atol=1e-10)
    n_eps = wm.WorldNoisePredictor(dataclasses.replace(CFG, prediction="eps"))
    assert wm.noise_estimate(n_eps, sched, v, zt, tau) is v


def test_unknown_prediction_rejected():
    with pytest.raises(ValueError):
        wm.WorldNoisePredictor(dataclasses.replace(CFG, prediction="x0"))


def test_ablated_model_ignores_conditioning():
    torch.manual_seed(0)
    n = wm.WorldNoisePredictor(wm.WMConfig(width=16, deep_width=32, token_dim=32, conditioned=False)).eval()
    with torch.no_grad():
        n.conv_out.weight.normal_(0, 0.05)
    z, tau, past, act = _inputs()
    assert torch.equal(n(z, tau, past, act), n(z, tau, past * 3 + 1, act * 0.5))


def test_train_requires_autoencoder():
    with pytest.raises(ValueError):
        wm.train_world_model(None, [], CFG)


# -- rollout protocol ----------------------------------------------------------------------------

def _seq_volumes(n):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        occ = np.zeros((wv.Z, wv.H, wv.W), np.uint8)
        occ[0] = wv.ROAD
        occ[1:3, 30:34, 10 + 2 * i:20 + 2 * i] = wv.VEHICLE
        out.append(wv.WorldVolume(occ, np.zeros((wv.H, wv.W, 3), np.uint8), 0.5, (float(i), 0.0, 0.0)))
    return out


@pytest.fixture(scope="module")
def tiny_world():
    torch.manual_seed(0)
    ae = VolumeAutoencoder()
    cfg = wm.WMConfig(width=16, deep_width=16, token_dim=16, T=4)
    return wm.WorldModel(ae, wm.WorldNoisePredictor(cfg))


def test_rollout_rounds(tiny_world, monkeypatch):
    calls, encoded = [], []
    real_sample, real_encode = tiny_world.sample_future, tiny_world.encode

    def sample(past, actions, generator, trace=None):
        calls.append(actions.clone())
        return real_sample(past, actions, generator)

    def encode(vols):
        encoded.append(list(vols))
        return real_encode(vols)

    monkeypatch.setattr(tiny_world, "sample_future", sample)
    monkeypatch.setattr(tiny_world, "encode", encode)
    init = _seq_volumes(3)
    acts = [(2.0, 0.0)] * 3
    seq = tiny_world.rollout(init, acts, [(2.0, 0.0)] * 3, 3, torch.Generator().manual_seed(0))
    assert len(calls) == 1 and len(seq) == 6
    assert seq.frames[:3] == init
    calls.clear()
    encoded.clear()
    seq = tiny_world.rollout(init, acts, [(2.0, 0.0)] * 3 + [(3.0, 0.1)] * 3, 6,
                             torch.Generator().manual_seed(0))
    assert len(calls) == 2 and len(seq) == 9
    # round two conditions on round one's decoded volumes and actions
    assert encoded[1] == seq.frames[3:6]
    assert calls[1].tolist() == [[[2.0, 0.0]] * 3]
    assert seq.actions[6:] == [(3.0, 0.1)] * 3


def test_rollout_poses_follow_actions(tiny_world):
    init = _seq_volumes(3)
    seq = tiny_world.rollout(init, [(2.0, 0.0)] * 3, [(2.0, 0.0)] * 3, 3, torch.Generator().manual_seed(0))
    xs = [f.ego_pose[0] for f in seq.frames]
    assert xs == pytest.approx([0, 1, 2, 3, 4, 5])


def test_rollout_errors(tiny_world):
    init = _seq_volumes(3)
    g = torch.Generator().manual_seed(0)
    with pytest.raises(ValueError):
        tiny_world.rollout(init, [(1.0, 0.0)] * 3, [(1.0, 0.0)] * 4, 4, g)
    with pytest.raises(ValueError):
        tiny_world.rollout(init, [(1.0, 0.0)] * 3, [(1.0, 0.0)] * 2, 3, g)
    with pytest.raises(ValueError):
        tiny_world.rollout(init[:2], [(1.0, 0.0)] * 2, [(1.0, 0.0)] * 3, 3, g)


def test_sample_future_deterministic(tiny_world):
    past = torch.randn(1, 3, 8, 16, 16)
    act = torch.ones(1, 3, 2)
    a = tiny_world.sample_future(past, act, torch.Generator().manual_seed(0))
    b = tiny_world.sample_future(past, act, torch.Generator().manual_seed(0))
    assert torch.equal(a, b) and a.shape == (1, 3, 8, 16, 16)


def test_windows():
    vols = _seq_volumes(6)
    seq = wv.WorldVolumeSequence(vols, [(float(i), 0.0) for i in range(6)])
    ws = wm.sequence_windows([seq], 3, 3)
    assert len(ws) == 1
    past, acts, fut = ws[0]
    assert past == vols[:3] and fut == vols[3:] and acts == seq.actions[:3]
    assert len(wm.sequence_windows([seq], 2, 1)) == 4


def test_clipped_mean_matches_eps_form_inside_range():
    sched = df.make_schedule(100)
    gen = torch.Generator().manual_seed(0)
    z = torch.randn(64, generator=gen, dtype=torch.float64)
    eps = torch.randn(64, generator=gen, dtype=torch.float64)
    for tau in (1, 2, 50, 100):
        a = df.p_mean(sched, z, tau, eps)
        b = df.p_mean(sched, z, tau, eps, clip=(-1e9, 1e9))
        assert torch.allclose(a, b, atol=1e-9)


def test_clipped_sampling_stays_in_range():
    sched = df.make_schedule(20)
    gen = torch.Generator().manual_seed(1)
    out = df.sample(sched, lambda z, tau: -3 * z, (500,), gen, clip=(-1.0, 1.0))
    assert out.abs().max() <= 1.0 + 1e-6
