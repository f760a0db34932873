import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from gdpd import diffusion as Df
from gdpd.diffusion import DenoiserSpec, FusionAdapter, NumericalError, make_schedule

from gradcheck import fd_relative_errors


class ConstDenoiser(nn.Module):
    """Returns a fixed tensor regardless of input (zero by default)."""

    def __init__(self, value=None):
        super().__init__()
        self.value = value

    def forward(self, z, t):
        return torch.zeros_like(z) if self.value is None else self.value.expand_as(z)


class OracleDenoiser(nn.Module):
    """Knows the clean point, so it can solve for the exact noise at any step."""

    def __init__(self, z0, schedule):
        super().__init__()
        self.z0, self.schedule = z0, schedule

    def forward(self, z, t):
        ab = self.schedule.alpha_bar(t).to(z.dtype)
        if ab.ndim:
            ab = ab[:, None]
        return (z - ab.sqrt() * self.z0) / (1 - ab).sqrt()


def saturated_adapter(D, value):
    ad = FusionAdapter(D)
    with torch.no_grad():
        ad.alpha_logits.fill_(value)
    return ad


# ---------------------------------------------------------------- schedule


def test_default_schedule_terminal_noise():
    s = make_schedule()
    assert s.T == 1000
    assert s.alpha_bars[-1] < 1e-4
    # independent product oracle
    assert math.isclose(s.alpha_bars[-1], math.prod(1 - b for b in np.linspace(1e-4, 0.02, 1000)),
                        rel_tol=1e-9)


def test_single_step_schedule():
    s = make_schedule(T=1, beta_start=0.3, beta_end=0.3)
    assert s.alpha_bars[0] == pytest.approx(0.7)
    assert float(s.alpha_bar(0)) == 1.0


@given(T=st.integers(1, 300), lo=st.floats(1e-5, 0.5), span=st.floats(0, 0.49),
       shape=st.sampled_from(["linear", "cosine"]))
@settings(max_examples=60, deadline=None)
def test_schedule_invariants(T, lo, span, shape):
    s = make_schedule(T, lo, lo + span, shape)
    assert ((s.betas > 0) & (s.betas < 1)).all()
    assert s.alpha_bars[0] == s.alphas[0]
    assert (np.diff(s.alpha_bars) < 0).all()


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 0.05), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_schedule_rejects_unknown_shape():
    with pytest.raises(ValueError):
        make_schedule(shape="sigmoid")


# ---------------------------------------------------------------- forward marginal


def test_marginal_zero_noise():
    s = make_schedule()
    z0 = torch.tensor([[1.0, -2.0, 3.0]], dtype=torch.float64)
    out = Df.forward_marginal(z0, 400, torch.zeros_like(z0), s)
    torch.testing.assert_close(out, math.sqrt(s.alpha_bars[399]) * z0)


def test_marginal_terminal_is_noise():
    s = make_schedule()
    z0 = torch.randn(4, 6, dtype=torch.float64)
    eps = torch.randn(4, 6, dtype=torch.float64)
    out = Df.forward_marginal(z0, s.T, eps, s)
    bound = math.sqrt(s.alpha_bars[-1]) * z0.norm(dim=1) + (1 - math.sqrt(1 - s.alpha_bars[-1])) * eps.norm(dim=1)
    assert ((out - eps).norm(dim=1) <= bound + 1e-12).all()


@pytest.mark.parametrize("t", [1, 10, 250, 500, 1000])
def test_marginal_monte_carlo(t):
    s = make_schedule()
    n = 100_000
    gen = torch.Generator().manual_seed(t)
    z0 = torch.tensor([0.7], dtype=torch.float64)
    zt = Df.forward_marginal(z0.expand(n, 1), t, torch.randn(n, 1, generator=gen, dtype=torch.float64), s)[:, 0]
    ab = s.alpha_bars[t - 1]
    var = 1 - ab
    mean_se = math.sqrt(var / n)
    var_se = var * math.sqrt(2 / (n - 1))
    assert abs(zt.mean().item() - math.sqrt(ab) * 0.7) <= 3 * mean_se
    assert abs(zt.var().item() - var) <= 3 * var_se


def test_marginal_rejects_out_of_range():
    s = make_schedule(T=10)
    z = torch.zeros(1, 2)
    for t in (0, 11):
        with pytest.raises(ValueError):
            Df.forward_marginal(z, t, z, s)


# ---------------------------------------------------------------- denoiser and loss


def test_denoiser_shapes_and_count():
    den = Df.build_denoiser(DenoiserSpec(100))
    assert den(torch.randn(3, 100), torch.tensor([1, 500, 1000])).shape == (3, 100)
    assert den(torch.randn(2, 100), 7).shape == (2, 100)
    assert den.n_params == sum(p.numel() for p in den.parameters())
    # sized near 0.2M parameters for 100-d features
    assert 0.19e6 < den.n_params + FusionAdapter(100).alpha_logits.numel() < 0.21e6


def test_loss_zero_for_oracle():
    s = make_schedule()
    z0 = torch.randn(32, 5, dtype=torch.float64)
    loss = Df.diffusion_loss(OracleDenoiser(z0, s), z0, s, torch.Generator().manual_seed(0))
    assert loss.item() < 1e-18


def test_loss_of_zero_denoiser_is_dimension():
    D, n = 6, 20_000
    s = make_schedule()
    loss = Df.diffusion_loss(ConstDenoiser(), torch.zeros(n, D), s, torch.Generator().manual_seed(1))
    se = math.sqrt(2 * D / n)  # chi-square with D dof
    assert abs(loss.item() - D) <= 4 * se


def test_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        Df.diffusion_loss(ConstDenoiser(), torch.zeros(0, 3), make_schedule(T=5))


def test_loss_gradient_matches_finite_differences():
    s = make_schedule(T=10, beta_start=1e-2, beta_end=0.2)
    den = Df.build_denoiser(DenoiserSpec(4, hidden=8, time_dim=4), seed=0).double()
    z0 = torch.randn(5, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64)

    def loss():
        return Df.diffusion_loss(den, z0, s, torch.Generator().manual_seed(3))

    assert fd_relative_errors(loss, list(den.parameters())) <= 1e-3


# ---------------------------------------------------------------- sampler


def test_ddim_timesteps_examples():
    assert Df.ddim_timesteps(1000, 5) == [1000, 800, 600, 400, 200]
    assert Df.ddim_timesteps(7, 7) == [7, 6, 5, 4, 3, 2, 1]
    assert Df.ddim_timesteps(1000, 1) == [1000]
    for bad in (0, 1001):
        with pytest.raises(ValueError):
            Df.ddim_timesteps(1000, bad)


@given(T=st.integers(1, 2000), data=st.data())
@settings(max_examples=80, deadline=None)
def test_ddim_timesteps_properties(T, data):
    nfe = data.draw(st.integers(1, T))
    steps = Df.ddim_timesteps(T, nfe)
    assert len(steps) == nfe and steps[0] == T and steps[-1] >= 1
    assert all(a > b for a, b in zip(steps, steps[1:]))


@pytest.mark.parametrize("t", [1, 2, 50, 500, 999, 1000])
def test_oracle_one_step_reconstruction(t):
    s = make_schedule()
    gen = torch.Generator().manual_seed(t)
    z0 = torch.randn(8, 5, generator=gen, dtype=torch.float64)
    zt = Df.forward_marginal(z0, t, torch.randn(8, 5, generator=gen, dtype=torch.float64), s)
    out = Df.ddim_step(OracleDenoiser(z0, s), zt, t, 0, s)
    assert (out - z0).abs().max().item() <= 1e-6


def test_oracle_multi_step_stays_on_trajectory():
    s = make_schedule()
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    eps = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    z = Df.forward_marginal(z0, 1000, eps, s)
    mid = Df.ddim_step(OracleDenoiser(z0, s), z, 1000, 600, s)
    torch.testing.assert_close(mid, Df.forward_marginal(z0, 600, eps, s))


def test_ddim_step_order_checked():
    s = make_schedule(T=10)
    z = torch.zeros(1, 2)
    for t, tp in ((5, 5), (3, 4), (11, 2), (2, -1)):
        with pytest.raises(ValueError):
            Df.ddim_step(ConstDenoiser(), z, t, tp, s)


def test_ddim_step_deterministic():
    s = make_schedule()
    den = Df.build_denoiser(DenoiserSpec(6), seed=1)
    z = torch.randn(3, 6)
    a = Df.ddim_step(den, z, 800, 600, s)
    b = Df.ddim_step(den, z, 800, 600, s)
    assert torch.equal(a, b)


# ---------------------------------------------------------------- fusion


def test_fuse_init_limits():
    z = torch.randn(5, 4)
    torch.testing.assert_close(Df.fuse_init(z, saturated_adapter(4, 60.0)), z, rtol=0, atol=0)
    out = Df.fuse_init(z, saturated_adapter(4, -60.0), torch.Generator().manual_seed(9))
    eps = torch.randn(5, 4, generator=torch.Generator().manual_seed(9))
    torch.testing.assert_close(out, eps, rtol=0, atol=1e-20)


def test_fuse_init_mean():
    n, z = 100_000, torch.tensor([[2.0, -1.0, 0.0]], dtype=torch.float64)
    out = Df.fuse_init(z.expand(n, 3), FusionAdapter(3), torch.Generator().manual_seed(0))
    se = 0.5 / math.sqrt(n)
    assert ((out.mean(0) - 0.5 * z[0]).abs() <= 3 * se).all()
    assert ((out.var(0) - 0.25).abs() <= 3 * 0.25 * math.sqrt(2 / n)).all()


def test_fuse_init_gradients_reach_inputs_alpha_and_projection():
    ad = FusionAdapter(6, student_dim=3)
    z = torch.randn(4, 3, requires_grad=True)
    Df.fuse_init(z, ad, torch.Generator().manual_seed(0)).pow(2).sum().backward()
    for g in (z.grad, ad.alpha_logits.grad, ad.project.weight.grad):
        assert g is not None and g.abs().sum() > 0


def test_adapter_alpha_in_unit_interval():
    ad = FusionAdapter(5)
    assert torch.allclose(ad.alpha, torch.full((5,), 0.5))
    with torch.no_grad():
        ad.alpha_logits.copy_(torch.tensor([-8.0, -1.0, 0.0, 1.0, 8.0]))
    assert ((ad.alpha > 0) & (ad.alpha < 1)).all()
    assert ad.project is None and ad.back_map(torch.ones(2, 5)).shape == (2, 5)


# ---------------------------------------------------------------- posterior sampling


def test_two_step_trace_with_zero_noise_prediction():
    s = make_schedule(T=10, beta_start=0.01, beta_end=0.2)
    z = torch.tensor([[1.0, -2.0, 0.5, 3.0]], dtype=torch.float64)
    out = Df.posterior_sample(ConstDenoiser(), s, saturated_adapter(4, 60.0).double(), z, nfe=2)
    ab = s.alpha_bars
    # by hand: 10 -> 5 -> 0 with eps_hat = 0
    z5 = math.sqrt(ab[4]) * (z / math.sqrt(ab[9]))
    z_end = z5 / math.sqrt(ab[4])
    torch.testing.assert_close(out, z_end)
    torch.testing.assert_close(out, z / math.sqrt(ab[9]))


def test_posterior_deterministic_given_seed():
    s = make_schedule()
    den = Df.build_denoiser(DenoiserSpec(6), seed=0)
    ad = FusionAdapter(6)
    z = torch.randn(4, 6)
    a = Df.posterior_sample(den, s, ad, z, 5, torch.Generator().manual_seed(11))
    b = Df.posterior_sample(den, s, ad, z, 5, torch.Generator().manual_seed(11))
    c = Df.posterior_sample(den, s, ad, z, 5, torch.Generator().manual_seed(12))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_posterior_numerical_error_names_step():
    s = make_schedule(T=10)
    bad = ConstDenoiser(torch.tensor(float("nan")))
    with pytest.raises(NumericalError, match="t=10"):
        Df.posterior_sample(bad, s, FusionAdapter(2), torch.zeros(1, 2), nfe=2)
    with pytest.raises(ValueError):
        Df.posterior_sample(bad, s, FusionAdapter(2), torch.zeros(1, 2), nfe=0)


def test_posterior_gradient_matches_finite_differences():
    s = make_schedule(T=10, beta_start=1e-2, beta_end=0.2)
    den = Df.build_denoiser(DenoiserSpec(4, hidden=8, time_dim=4), seed=1).double()
    ad = FusionAdapter(4).double()
    z = torch.randn(3, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    z.requires_grad_(True)

    def objective():
        out = Df.posterior_sample(den, s, ad, z, nfe=2, generator=torch.Generator().manual_seed(5))
        return out.pow(2).sum()

    (g,) = torch.autograd.grad(objective(), [z])
    assert g.abs().sum() > 0
    assert fd_relative_errors(objective, [z, ad.alpha_logits]) <= 1e-3


@pytest.fixture(scope="module")
def cluster_prior():
    """Denoiser fitted to a 70/30 mixture of tight clusters at +1 and -1 in 8-d."""
    torch.manual_seed(0)
    D, sigma = 8, 0.05
    gen = torch.Generator().manual_seed(0)
    means = torch.stack([torch.ones(D), -torch.ones(D)])
    labels = (torch.rand(500, generator=gen) < 0.3).long()
    z0 = means[labels] + sigma * torch.randn(500, D, generator=gen)
    s = make_schedule()
    den = Df.build_denoiser(DenoiserSpec(D), seed=0)
    steps = 4000
    opt = torch.optim.Adam(den.parameters(), lr=2e-3)
    lr = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for _ in range(steps):
        idx = torch.randint(0, 500, (256,), generator=gen)
        loss = Df.diffusion_loss(den, z0[idx], s, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr.step()
    den.requires_grad_(False)
    return den, s, means, sigma, z0


def test_cluster_prior_fits(cluster_prior):
    den, s, _, _, z0 = cluster_prior
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        loss = np.mean([Df.diffusion_loss(den, z0, s, gen).item() for _ in range(20)])
    assert loss / z0.shape[1] < 0.05  # per-coordinate squared error


def test_unconditional_samples_match_weights(cluster_prior):
    den, s, means, _, _ = cluster_prior
    with torch.no_grad():
        out = Df.sample_prior(den, s, 2000, nfe=50, generator=torch.Generator().manual_seed(2))
    share = (torch.cdist(out, means).argmin(1) == 1).float().mean().item()
    assert abs(share - 0.3) <= 0.1


def test_posterior_lands_on_a_cluster(cluster_prior):
    den, s, means, sigma, _ = cluster_prior
    z_short = 0.5 * torch.randn(1000, 8, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        out = Df.posterior_sample(den, s, FusionAdapter(8), z_short, nfe=50,
                                  generator=torch.Generator().manual_seed(4))
    dist = torch.cdist(out, means).min(1).values
    assert (dist <= 3 * sigma * math.sqrt(8)).float().mean().item() >= 0.95


def test_posterior_follows_informative_input(cluster_prior):
    den, s, means, _, _ = cluster_prior
    z_short = means[1].expand(200, 8)  # sits on the minority cluster
    with torch.no_grad():
        out = Df.posterior_sample(den, s, saturated_adapter(8, 2.0), z_short, nfe=5,
                                  generator=torch.Generator().manual_seed(5))
    assert (torch.cdist(out, means).argmin(1) == 1).float().mean().item() >= 0.9


# ---------------------------------------------------------------- checkpoints


def test_prior_checkpoint_roundtrip(tmp_path):
    den = Df.build_denoiser(DenoiserSpec(5, hidden=16, time_dim=8), seed=3)
    ad = FusionAdapter(5, student_dim=3)
    Df.save_prior(tmp_path / "p.ckpt", den, ad)
    den2, ad2 = Df.load_prior(tmp_path / "p.ckpt")
    assert den2.spec == den.spec and (ad2.teacher_dim, ad2.student_dim) == (5, 3)
    for a, b in zip(list(den.state_dict().values()) + list(ad.state_dict().values()),
                    list(den2.state_dict().values()) + list(ad2.state_dict().values())):
        assert torch.equal(a, b)
    assert Df.prior_to_bytes(den2, ad2) == (tmp_path / "p.ckpt").read_bytes()
    den3, ad3 = Df.prior_from_bytes(Df.prior_to_bytes(den))
    assert ad3 is None
