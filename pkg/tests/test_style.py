import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from smunet.decomposition import StyleRepresentation
from smunet.style import (Discriminator, GaussianHead, GaussianStats, adversarial_losses, discriminator_loss,
                          distribution_match, gaussian_kl, generator_loss, gram, reparameterize, texture_loss)

from conftest import fd_check


def kl_oracle(mu_q, s_q, mu_p, s_p):
    """Closed-form KL between 1-D Gaussians, summed over independent dimensions."""
    mu_q, s_q, mu_p, s_p = map(np.asarray, (mu_q, s_q, mu_p, s_p))
    return float(np.sum(np.log(s_p / s_q) + (s_q ** 2 + (mu_q - mu_p) ** 2) / (2 * s_p ** 2) - 0.5))


def stats(mean, std):
    mean = torch.as_tensor(mean, dtype=torch.float64).reshape(1, -1)
    std = torch.as_tensor(std, dtype=torch.float64).reshape(1, -1)
    return GaussianStats(mean, std.log())


def random_style(seed, widths=(2, 3), sizes=(4, 2), dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return StyleRepresentation([torch.randn(1, c, s, s, s, generator=g, dtype=dtype) for c, s in zip(widths, sizes)])


class ConstantDisc(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, style):
        return torch.full((style.layers[-1].shape[0],), self.value, dtype=torch.float64)


# --- gram / texture ---------------------------------------------------------------

def test_gram_worked_example():
    f = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(gram(f), torch.tensor([[5.0, 11.0], [11.0, 25.0]]))


def test_gram_of_zero_layer_is_zero():
    assert not gram(torch.zeros(1, 3, 2, 2, 2)).any()


def test_gram_flattens_batch_one_volume():
    layer = torch.randn(1, 3, 2, 2, 2, dtype=torch.float64)
    f = layer[0].reshape(3, -1)
    torch.testing.assert_close(gram(layer), f @ f.T)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 20), st.integers(0, 10 ** 6))
def test_gram_is_symmetric(c, n, seed):
    f = torch.randn(c, n, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    g = gram(f)
    assert torch.equal(g, g.T)


def test_texture_loss_worked_example():
    f = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    loss = texture_loss(StyleRepresentation([f]), StyleRepresentation([torch.zeros_like(f)]), weights=[1.0])
    assert float(loss) == 892 / 64 == 13.9375


def test_texture_loss_zero_on_identical_styles():
    s = random_style(0)
    assert float(texture_loss(s, s)) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_texture_loss_invariant_to_spatial_permutation(seed):
    sf, sm = random_style(seed), random_style(seed + 1)
    g = torch.Generator().manual_seed(seed)
    permuted = []
    for layer in sm.layers:
        flat = layer.flatten(2)
        permuted.append(flat[:, :, torch.randperm(flat.shape[-1], generator=g)].reshape(layer.shape))
    a = texture_loss(sf, sm)
    b = texture_loss(sf, StyleRepresentation(permuted))
    assert math.isclose(float(a), float(b), rel_tol=1e-10)


def test_texture_loss_does_not_train_the_full_path():
    sf, sm = random_style(1), random_style(2)
    for t in sf.layers + sm.layers:
        t.requires_grad_(True)
    texture_loss(sf, sm).backward()
    assert all(t.grad is None for t in sf.layers)
    assert all(t.grad is not None for t in sm.layers)


def test_texture_loss_rejects_mismatch():
    with pytest.raises(ValueError):
        texture_loss(random_style(0), random_style(0, widths=(2, 4)))


# --- gaussian head and KL ---------------------------------------------------------

def test_kl_worked_examples():
    assert abs(float(gaussian_kl(stats([1.0], [1.0]), stats([0.0], [1.0]))) - 0.5) < 1e-9
    expected = math.log(0.5) + 4 / 2 - 0.5
    assert abs(float(gaussian_kl(stats([0.0], [2.0]), stats([0.0], [1.0]))) - expected) < 1e-9
    assert abs(expected - 0.8069) < 1e-4


def test_kl_zero_when_equal():
    q = stats([0.3, -1.0], [0.5, 2.0])
    assert float(gaussian_kl(q, q)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.1, 3), st.floats(-3, 3), st.floats(0.1, 3)),
                min_size=1, max_size=6))
def test_kl_matches_closed_form_oracle(dims):
    mq, sq, mp, sp = zip(*dims)
    got = float(gaussian_kl(stats(mq, sq), stats(mp, sp)))
    assert got >= -1e-12
    assert math.isclose(got, kl_oracle(mq, sq, mp, sp), rel_tol=1e-9, abs_tol=1e-12)


def test_zero_initialised_head_is_standard_normal():
    head = GaussianHead([2, 3], latent_dim=5).double()
    out = head(random_style(4))
    assert out.dim == 5
    assert not out.mean.any() and not out.log_std.any()


def test_head_output_size_independent_of_spatial_size():
    head = GaussianHead([2, 3], latent_dim=7).double()
    for p in head.parameters():
        p.data.normal_()
    a = head(random_style(0, sizes=(4, 2)))
    b = head(random_style(0, sizes=(8, 4)))
    assert a.mean.shape == b.mean.shape == (1, 7)
    c = head(random_style(0, sizes=(8, 4)))
    assert torch.equal(b.mean, c.mean) and torch.equal(b.log_std, c.log_std)


def test_pinned_noise_gives_posterior_mean():
    q = stats([0.5, -0.5], [2.0, 3.0])
    assert torch.equal(reparameterize(q, eps=torch.zeros(1, 2)), q.mean)


def test_reparameterize_is_seeded():
    q = stats([0.0], [1.0])
    a = reparameterize(q, torch.Generator().manual_seed(3))
    b = reparameterize(q, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)


def test_distribution_match_identical_styles_shared_head():
    head = GaussianHead([2, 3], latent_dim=4).double()
    for p in head.parameters():
        p.data.normal_()
    s = random_style(5)
    loss, signal = distribution_match(s, s, head, generator=torch.Generator().manual_seed(0))
    assert float(loss.detach()) == 0.0
    assert signal.z.shape == (1, 4)


def test_distribution_match_inference_needs_no_full_style():
    head = GaussianHead([2, 3], latent_dim=4).double()
    loss, signal = distribution_match(None, random_style(1), head, eps=torch.zeros(1, 4), train=False)
    assert loss is None and not signal.z.any()
    with pytest.raises(ValueError, match="full-modality"):
        distribution_match(None, random_style(1), head)


def test_kl_decreases_under_optimisation():
    torch.manual_seed(0)
    post, prior = GaussianHead([2, 3], 4).double(), GaussianHead([2, 3], 4).double()
    for p in prior.parameters():
        p.data.normal_(0, 0.5)
    sf, sm = random_style(10), random_style(11)
    opt = torch.optim.Adam(post.parameters(), lr=1e-2)
    losses = []
    for _ in range(50):
        loss, _ = distribution_match(sf, sm, post, prior, generator=torch.Generator().manual_seed(0))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]


# --- adversarial ------------------------------------------------------------------

def test_constant_half_discriminator_losses():
    d_loss, g_loss, _ = adversarial_losses(random_style(0), random_style(1), ConstantDisc(0.5))
    assert abs(float(d_loss) - 2 * math.log(2)) < 1e-9
    assert abs(float(g_loss) - math.log(2)) < 1e-9


def test_perfect_discriminator_limits_are_clamped():
    class Perfect(torch.nn.Module):
        def forward(self, style):
            return torch.tensor([1.0 if style.layers[0][0, 0, 0, 0, 0] > 0 else 0.0], dtype=torch.float64)

    real = StyleRepresentation([torch.ones(1, 1, 2, 2, 2, dtype=torch.float64)])
    fake = StyleRepresentation([-torch.ones(1, 1, 2, 2, 2, dtype=torch.float64)])
    d_loss = discriminator_loss(real, fake, Perfect())
    g_loss = generator_loss(fake, Perfect())
    assert 0 <= float(d_loss) < 1e-6
    assert math.isfinite(float(g_loss)) and float(g_loss) > 15


def test_discriminator_output_in_open_unit_interval():
    torch.manual_seed(0)
    disc = Discriminator(3).double()
    out = disc(random_style(0, widths=(3,), sizes=(4,)))
    assert out.shape == (1,) and 0 < out.item() < 1
    disc.eval()
    zero = StyleRepresentation([torch.zeros(1, 3, 4, 4, 4, dtype=torch.float64)])
    assert torch.equal(disc(zero), disc(zero))


def test_discriminator_loss_keeps_paths_detached():
    sf, sm = random_style(0, (3,), (4,)), random_style(1, (3,), (4,))
    for t in sf.layers + sm.layers:
        t.requires_grad_(True)
    disc = Discriminator(3).double()
    discriminator_loss(sf, sm, disc).backward()
    assert sf.layers[0].grad is None and sm.layers[0].grad is None
    assert disc.classifier.weight.grad is not None


def test_generator_steps_raise_fake_score():
    torch.manual_seed(0)
    disc = Discriminator(2, hidden=8).double()
    disc.eval()  # running statistics, so scores before and after a step are comparable
    real = random_style(0, (2,), (4,))
    fake_param = torch.nn.Parameter(random_style(1, (2,), (4,)).layers[0])
    d_opt = torch.optim.Adam(disc.parameters(), lr=1e-3)
    g_opt = torch.optim.SGD([fake_param], lr=1e-1)
    raised = 0
    for _ in range(100):
        fake = StyleRepresentation([fake_param])
        d_opt.zero_grad()
        discriminator_loss(real, fake, disc).backward()
        d_opt.step()
        with torch.no_grad():
            before = float(disc(fake))
        g_opt.zero_grad()
        generator_loss(fake, disc).backward()
        g_opt.step()
        with torch.no_grad():
            raised += float(disc(fake)) > before
    assert raised >= 95


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_discriminator_gradient_matches_finite_difference(seed):
    torch.manual_seed(seed)
    disc = Discriminator(3, hidden=8).double()
    sf, sm = random_style(seed, (3,), (4,)), random_style(seed + 50, (3,), (4,))
    err = fd_check(lambda: discriminator_loss(sf, sm, disc), list(disc.parameters()), n=10, seed=seed)
    assert err < 1e-3
