import math

import numpy as np
import pytest
import torch
from oracles import posterior_variance_bayes

from propdiff.diffusion import (
    LatentDiffusion,
    NoiseSchedule,
    UNet1DDenoiser,
    diffusion_loss,
    forward_marginal,
    forward_step,
    make_schedule,
    posterior_mean_variance,
    posterior_step,
    sample_latents,
)

N_MC = 100_000


def tiny_denoiser(seed=0):
    torch.manual_seed(seed)
    return UNet1DDenoiser(8, 4, base_channels=8, levels=1, emb_dim=16, n_heads=2).double().eval()


class CleanLatentOracle:
    """Always predicts the same known clean latent."""

    def __init__(self, z0):
        self.z0 = z0
        self.latent_dim = z0.shape[1]

    def __call__(self, z, t, cond=None, cond_mask=None):
        return self.z0.expand(z.shape[0], -1)


class GaussianPosteriorOracle:
    """Exact E[z0 | z_t] when the data are N(m, v) in one dimension."""

    latent_dim = 1

    def __init__(self, schedule, m, v):
        self.ab = np.concatenate([[1.0], schedule.alpha_bar])
        self.m, self.v = m, v

    def __call__(self, z, t, cond=None):
        ab = float(self.ab[int(t[0])])
        gain = self.v * math.sqrt(ab) / (ab * self.v + 1 - ab)
        return self.m + gain * (z - math.sqrt(ab) * self.m)


def test_schedule_single_step():
    s = make_schedule(1, 1e-4, 0.02)
    assert s.T == 1 and s.alpha_bar[0] == pytest.approx(1 - 1e-4)


def test_linear_schedule_shape():
    s = make_schedule(1000)
    assert s.beta[0] == 1e-4 and s.beta[-1] == pytest.approx(0.02, abs=1e-15)
    np.testing.assert_allclose(np.diff(s.beta), (0.02 - 1e-4) / 999, rtol=1e-9)
    assert np.all(np.diff(s.alpha_bar) < 0)
    snr = s.alpha_bar / (1 - s.alpha_bar)
    assert np.all(np.diff(snr) < 0)


def test_schedule_rejects_bad_args():
    with pytest.raises(ValueError, match="T must be >= 1"):
        make_schedule(0)
    with pytest.raises(ValueError, match="beta_start"):
        make_schedule(10, 0.1, 0.01)
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.5, 1.0]))


def test_forward_step_examples():
    s = NoiseSchedule(np.array([0.0, 0.36]))
    z = torch.tensor([[1.5, -2.0]], dtype=torch.float64)
    assert torch.equal(forward_step(z, 1, s, torch.ones_like(z)), z)
    torch.testing.assert_close(forward_step(z, 2, s, torch.zeros_like(z)), 0.8 * z)


def test_forward_marginal_examples():
    s = make_schedule(50)
    z0 = torch.tensor([[0.3, -0.7]], dtype=torch.float64)
    assert torch.equal(forward_marginal(z0, 0, s, torch.randn(1, 2, dtype=torch.float64)), z0)
    with pytest.raises(ValueError, match="outside"):
        forward_marginal(z0, 51, s, z0)


def test_forward_marginal_moments():
    s = make_schedule(100)
    g = torch.Generator().manual_seed(0)
    z0 = 1.2
    t = 40
    z = forward_marginal(torch.full((N_MC, 1), z0, dtype=torch.float64), t, s,
                         torch.randn(N_MC, 1, generator=g, dtype=torch.float64))
    ab = s.alpha_bar[t - 1]
    var = 1 - ab
    assert abs(z.mean().item() - math.sqrt(ab) * z0) < 3 * math.sqrt(var / N_MC)
    assert abs(z.var().item() - var) < 3 * var * math.sqrt(2 / (N_MC - 1))


def test_iterated_steps_match_marginal():
    s = make_schedule(100, 1e-3, 0.05)
    g = torch.Generator().manual_seed(1)
    z = torch.full((N_MC, 1), -0.5, dtype=torch.float64)
    for t in range(1, 11):
        z = forward_step(z, t, s, torch.randn(N_MC, 1, generator=g, dtype=torch.float64))
    ab = s.alpha_bar[9]
    var = 1 - ab
    assert abs(z.mean().item() - math.sqrt(ab) * -0.5) < 3 * math.sqrt(var / N_MC)
    assert abs(z.var().item() - var) < 3 * var * math.sqrt(2 / (N_MC - 1))


def test_posterior_step_without_noise_is_mean():
    s = make_schedule(20)
    zt, z0 = torch.tensor([[0.4]]), torch.tensor([[-1.0]])
    mean, _ = posterior_mean_variance(zt, z0, 7, s)
    assert torch.equal(posterior_step(zt, z0, 7, s, torch.zeros(1, 1)), mean)
    with pytest.raises(ValueError):
        posterior_step(zt, z0, 0, s, torch.zeros(1, 1))


def test_posterior_single_step_returns_clean_estimate():
    s = make_schedule(1, 0.02, 0.02)
    z0 = torch.tensor([[0.25, 3.0]], dtype=torch.float64)
    out = posterior_step(torch.randn(1, 2, dtype=torch.float64), z0, 1, s, torch.randn(1, 2, dtype=torch.float64))
    torch.testing.assert_close(out, z0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("t", [2, 10, 37])
def test_posterior_variance_matches_bayes(t):
    s = make_schedule(40, 1e-3, 0.05)
    _, var = posterior_mean_variance(0.0, 0.0, t, s)
    assert abs(var - posterior_variance_bayes(s.beta, t)) < 1e-8
    assert var == pytest.approx(s.posterior_variance()[t - 1], rel=1e-12)


def test_denoiser_shape_determinism_and_condition():
    net = tiny_denoiser()
    z = torch.randn(3, 8, dtype=torch.float64)
    t = torch.tensor([1, 5, 9])
    c = torch.randn(3, 4, dtype=torch.float64)
    with torch.no_grad():
        a, b = net(z, t, c), net(z, t, c)
        other = net(z, t, c + 1)
        masked = net(z, t, c, torch.ones(3, dtype=torch.bool))
        uncond = net(z, t)
    assert a.shape == (3, 8) and torch.equal(a, b)
    assert not torch.allclose(a, other)
    torch.testing.assert_close(masked, uncond)
    with pytest.raises(ValueError, match="z_t: expected shape"):
        net(z[:, :7], t, c)
    with pytest.raises(ValueError, match="cond: expected shape"):
        net(z, t, c[:, :3])
    with pytest.raises(ValueError, match="divisible"):
        UNet1DDenoiser(6, 4, levels=2)


def test_loss_zero_for_oracle_and_nonnegative():
    s = make_schedule(30)
    z0 = torch.randn(1, 8, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    assert diffusion_loss(CleanLatentOracle(z0), z0.expand(5, -1), None, s, g).item() == 0.0
    loss = diffusion_loss(tiny_denoiser(), torch.randn(5, 8, dtype=torch.float64), torch.randn(5, 4, dtype=torch.float64), s, g)
    assert loss.item() >= 0


def test_sampling_with_clean_oracle_recovers_latent():
    s = make_schedule(1000)
    z0 = torch.tensor([[0.9, -0.2, 1.7, 0.0]], dtype=torch.float64)
    out = sample_latents(CleanLatentOracle(z0), s, 16, None, torch.Generator().manual_seed(0), torch.float64)
    assert (out - z0).abs().max().item() < 1e-6


def test_sampling_more_steps_is_more_faithful():
    errs = {}
    for T in (1000, 100):
        s = make_schedule(T, 1e-4, 0.02 * 1000 / T * 0.99 if T < 1000 else 0.02)
        oracle = GaussianPosteriorOracle(s, 2.0, 0.25)
        z = sample_latents(oracle, s, N_MC, None, torch.Generator().manual_seed(0), torch.float64)
        errs[T] = abs(z.var().item() - 0.25)
        if T == 1000:
            assert abs(z.mean().item() - 2.0) < 3 * math.sqrt(0.25 / N_MC)
            assert errs[T] < 0.01
    assert errs[1000] < errs[100]


def test_sampling_seeded_and_empty():
    s = make_schedule(10)
    net = tiny_denoiser()
    c = torch.randn(2, 4, dtype=torch.float64)
    a = sample_latents(net, s, 2, c, torch.Generator().manual_seed(3), torch.float64)
    b = sample_latents(net, s, 2, c, torch.Generator().manual_seed(3), torch.float64)
    assert torch.equal(a, b)
    assert sample_latents(net, s, 0, None).shape == (0, 8)


TINY = dict(n_steps=10, base_channels=8, levels=1, emb_dim=16, n_heads=2, batch_size=4, dtype="float64")


def test_estimator_seeded_and_roundtrip(tmp_path, rng):
    Z, C = rng.normal(size=(6, 8)), rng.normal(size=(6, 4))
    a = LatentDiffusion(**TINY, epochs=2).fit(Z, C)
    b = LatentDiffusion(**TINY, epochs=2).fit(Z, C)
    assert a.history_ == b.history_
    np.testing.assert_array_equal(a.sample(C[:3], random_state=5), b.sample(C[:3], random_state=5))
    a.save(tmp_path / "d.npz")
    c = LatentDiffusion.load(tmp_path / "d.npz")
    np.testing.assert_array_equal(c.sample(C[:3], random_state=5), a.sample(C[:3], random_state=5))
    assert a.sample(n_samples=0).shape == (0, 8)
    with pytest.raises(ValueError, match="expected 4 columns"):
        a.sample(C[:, :3])


def test_estimator_rejects_bad_input(rng):
    with pytest.raises(ValueError, match="conditions"):
        LatentDiffusion(**TINY, epochs=1).fit(rng.normal(size=(4, 8)), rng.normal(size=(3, 4)))
    with pytest.raises(ValueError, match="p_uncond"):
        LatentDiffusion(**TINY, epochs=1, p_uncond=1.0).fit(rng.normal(size=(4, 8)), rng.normal(size=(4, 4)))
