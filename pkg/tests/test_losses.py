import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from adroit.core import ALConfig, InvalidArgumentError, InvalidStateError, Rng
from adroit.data import make_batch
from adroit.losses import (
    LOSS_COLUMNS, adv_gen_loss, combine, disc_loss, kd_loss, kl_unit_gaussian, proxy_ssl_loss, proxy_sup_loss,
    reconstruction_loss, target_loss, total_vae_loss, url_loss,
)
from adroit.nets import Head, build_bundle, build_target, classify_proxy, decode, encode, reparameterize

from conftest import finite_difference_check

LN2, LN3, LN6 = math.log(2), math.log(3), math.log(6)


def _zero_(*modules):
    with torch.no_grad():
        for module in modules:
            for p in module.parameters():
                p.zero_()


def _params(*modules):
    return [p for m in modules for p in m.parameters()]


# ========================
# KL + reconstruction
# ========================

def test_kl_zero_at_prior():
    assert kl_unit_gaussian(torch.zeros(3, 4), torch.zeros(3, 4)).item() == 0.0


def test_kl_unit_mean_shift():
    assert kl_unit_gaussian(torch.tensor([1.0]), torch.tensor([0.0])).item() == pytest.approx(0.5)


def test_kl_matches_monte_carlo():
    gen = np.random.default_rng(0)
    torch_gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        d = int(gen.integers(4, 9))
        mu = torch.tensor(gen.uniform(0.5, 1.5, d) * gen.choice([-1, 1], d))
        logvar = torch.tensor(gen.uniform(-1, 1, d))
        std = torch.exp(0.5 * logvar)
        z = mu + std * torch.randn(200_000, d, generator=torch_gen, dtype=torch.float64)
        log_q = torch.distributions.Normal(mu, std).log_prob(z).sum(1)
        log_p = torch.distributions.Normal(torch.zeros_like(mu), torch.ones_like(mu)).log_prob(z).sum(1)
        estimate = (log_q - log_p).mean().item()
        exact = kl_unit_gaussian(mu, logvar).item()
        assert abs(estimate - exact) / exact < 0.02


def test_kl_is_batch_mean():
    mu = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    assert kl_unit_gaussian(mu, torch.zeros(2, 2)).item() == pytest.approx(0.25)


def test_kl_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        kl_unit_gaussian(torch.zeros(2, 3), torch.zeros(2, 2))


def test_reconstruction_examples():
    x = torch.rand(2, 3, 4, 4)
    assert reconstruction_loss(x, x.clone()).item() == 0.0
    assert reconstruction_loss(torch.ones(1, 1, 1, 1), torch.zeros(1, 1, 1, 1)).item() == 1.0
    with pytest.raises(InvalidArgumentError):
        reconstruction_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 2))


def test_reconstruction_gradient():
    x = torch.rand(3, 1, 2, 2, dtype=torch.float64)
    x_hat = torch.rand(3, 1, 2, 2, dtype=torch.float64, requires_grad=True)
    reconstruction_loss(x, x_hat).backward()
    assert torch.allclose(x_hat.grad, 2 * (x_hat.detach() - x) / 3)


# ========================
# VAE terms
# ========================

def test_url_beta_zero_is_pure_reconstruction(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    rng = Rng(3)
    total = url_loss(labeled, unlabeled, bundle64, 0.0, rng)
    expected = 0.0
    for batch, label in ((labeled, "labeled"), (unlabeled, "unlabeled")):
        mu, logvar = encode(bundle64.encoder, batch.images)
        code = reparameterize(mu, logvar, rng.child(label))
        expected += reconstruction_loss(batch.images, decode(bundle64.generator, code.sample)).item()
    assert total.item() == pytest.approx(expected, rel=1e-12)


def test_url_is_reconstruction_plus_weighted_kl(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    rng = Rng(3)
    expected = 0.0
    for batch, label in ((labeled, "labeled"), (unlabeled, "unlabeled")):
        mu, logvar = encode(bundle64.encoder, batch.images)
        code = reparameterize(mu, logvar, rng.child(label))
        expected += (reconstruction_loss(batch.images, decode(bundle64.generator, code.sample))
                     + 2.5 * kl_unit_gaussian(mu, logvar)).item()
    assert url_loss(labeled, unlabeled, bundle64, 2.5, rng).item() == pytest.approx(expected, rel=1e-12)


def test_url_needs_both_pools(batch_pair, bundle64):
    labeled, _ = batch_pair
    with pytest.raises(InvalidArgumentError):
        url_loss(labeled, None, bundle64, 1.0, Rng(0))


def test_proxy_sup_uniform_logits(batch_pair, bundle64):
    labeled, _ = batch_pair
    _zero_(bundle64.classifier.label_head)
    ce_only = proxy_sup_loss(labeled, bundle64, Rng(0), include_kl=False)
    assert ce_only.item() == pytest.approx(LN3, abs=1e-9)
    mu, logvar = encode(bundle64.encoder, labeled.images)
    with_kl = proxy_sup_loss(labeled, bundle64, Rng(0))
    assert with_kl.item() == pytest.approx(LN3 + kl_unit_gaussian(mu, logvar).item(), abs=1e-9)


def test_proxy_sup_matches_independent_evaluation(batch_pair, bundle64):
    labeled, _ = batch_pair
    mu, logvar = encode(bundle64.encoder, labeled.images)
    code = reparameterize(mu, logvar, Rng(9).child("labeled"))
    logits = classify_proxy(bundle64.classifier, code.sample, Head.LABEL)
    expected = F.cross_entropy(logits, labeled.labels) + kl_unit_gaussian(mu, logvar)
    assert proxy_sup_loss(labeled, bundle64, Rng(9)).item() == pytest.approx(expected.item(), rel=1e-12)


def test_proxy_sup_needs_labels(batch_pair, bundle64):
    _, unlabeled = batch_pair
    with pytest.raises(InvalidArgumentError):
        proxy_sup_loss(unlabeled, bundle64, Rng(0))


def test_proxy_ssl_uniform_logits(batch_pair, bundle64):
    _, unlabeled = batch_pair
    _zero_(bundle64.classifier.rotation_head)
    assert proxy_ssl_loss(unlabeled, bundle64, Rng(0), include_kl=False).item() == pytest.approx(LN6, abs=1e-9)


def test_proxy_ssl_uses_transformed_view(batch_pair, bundle64):
    _, unlabeled = batch_pair
    mu, logvar = encode(bundle64.encoder, unlabeled.pretext_images)
    code = reparameterize(mu, logvar, Rng(2).child("pretext"))
    logits = classify_proxy(bundle64.classifier, code.sample, Head.ROTATION)
    expected = F.cross_entropy(logits, unlabeled.pretext_labels) + kl_unit_gaussian(mu, logvar)
    assert proxy_ssl_loss(unlabeled, bundle64, Rng(2)).item() == pytest.approx(expected.item(), rel=1e-12)


def test_proxy_ssl_needs_pretext(tiny_dataset, bundle64):
    plain = make_batch(tiny_dataset, [1, 2], with_labels=False, dtype=torch.float64)
    with pytest.raises(InvalidArgumentError):
        proxy_ssl_loss(plain, bundle64, Rng(0))


# ========================
# Distillation
# ========================

def test_kd_zero_when_logits_match(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    for head in ("label_head", "rotation_head"):
        proxy, teacher = getattr(bundle64.classifier, head), getattr(bundle64.target, head)
        with torch.no_grad():
            proxy.weight.zero_()
            teacher.weight.zero_()
            proxy.bias.copy_(torch.arange(proxy.bias.numel(), dtype=torch.float64))
            teacher.bias.copy_(proxy.bias)
    assert kd_loss(labeled, unlabeled, bundle64).item() == 0.0


def test_kd_single_sample_squared_norm(tiny_cfg, tiny_dataset):
    bundle = build_bundle(tiny_cfg, (3, 8, 8), 2, Rng(0), torch.float64)
    bundle.target = build_target(tiny_cfg, (3, 8, 8), 2, Rng(0), torch.float64)
    _zero_(bundle.classifier.label_head, bundle.target.label_head)
    with torch.no_grad():
        bundle.target.label_head.bias.copy_(torch.tensor([1.0, 0.0]))
    labeled = make_batch(tiny_dataset, [0], dtype=torch.float64)
    assert kd_loss(labeled, None, bundle).item() == pytest.approx(1.0, abs=1e-12)


def test_kd_stops_gradient_to_target(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    kd_loss(labeled, unlabeled, bundle64).backward()
    assert all(p.grad is None for p in bundle64.target.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in bundle64.classifier.parameters())


def test_kd_head_width_mismatch(tiny_cfg, batch_pair, bundle64):
    labeled, _ = batch_pair
    bundle64.target = build_target(tiny_cfg, (3, 8, 8), 5, Rng(0), torch.float64)
    with pytest.raises(InvalidArgumentError):
        kd_loss(labeled, None, bundle64)


def test_kd_needs_target(batch_pair, bundle64):
    labeled, _ = batch_pair
    bundle64.target = None
    with pytest.raises(InvalidStateError):
        kd_loss(labeled, None, bundle64)


# ========================
# Adversarial terms
# ========================

def test_adversarial_terms_at_one_half(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    _zero_(bundle64.discriminator)
    assert adv_gen_loss(labeled, unlabeled, bundle64).item() == pytest.approx(2 * LN2, abs=1e-9)
    assert disc_loss(labeled, unlabeled, bundle64).item() == pytest.approx(2 * LN2, abs=1e-9)


def test_adv_gen_matches_direct_formula(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    with torch.no_grad():
        p_l = bundle64.discriminator(encode(bundle64.encoder, labeled.images)[0])
        p_u = bundle64.discriminator(encode(bundle64.encoder, unlabeled.images)[0])
    expected = -torch.log(p_l).mean() - torch.log(p_u).mean()
    assert adv_gen_loss(labeled, unlabeled, bundle64).item() == pytest.approx(expected.item(), rel=1e-12)


def test_disc_loss_labels_labeled_as_one(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    with torch.no_grad():
        p_l = bundle64.discriminator(encode(bundle64.encoder, labeled.images)[0])
        p_u = bundle64.discriminator(encode(bundle64.encoder, unlabeled.images)[0])
    expected = -torch.log(p_l).mean() - torch.log(1 - p_u).mean()
    assert disc_loss(labeled, unlabeled, bundle64).item() == pytest.approx(expected.item(), rel=1e-12)


def test_adv_gen_stops_gradient_to_discriminator(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    adv_gen_loss(labeled, unlabeled, bundle64).backward()
    assert all(p.grad is None for p in bundle64.discriminator.parameters())
    assert any(p.grad is not None for p in bundle64.encoder.parameters())


def test_disc_loss_stops_gradient_to_vae(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    disc_loss(labeled, unlabeled, bundle64).backward()
    for module in (bundle64.encoder, bundle64.generator, bundle64.classifier):
        assert all(p.grad is None for p in module.parameters())
    assert all(p.grad is not None for p in bundle64.discriminator.parameters())


def test_deterministic_terms_ignore_batch_order(tiny_dataset, bundle64):
    idx_l, idx_u, codes = np.array([0, 3, 11, 25]), np.array([1, 2, 14, 20]), np.array([0, 1, 4, 5])
    perm = np.array([2, 0, 3, 1])
    l1 = make_batch(tiny_dataset, idx_l, dtype=torch.float64)
    u1 = make_batch(tiny_dataset, idx_u, with_labels=False, pretext_codes=codes, dtype=torch.float64)
    l2 = make_batch(tiny_dataset, idx_l[perm], dtype=torch.float64)
    u2 = make_batch(tiny_dataset, idx_u[perm], with_labels=False, pretext_codes=codes[perm], dtype=torch.float64)
    for fn in (kd_loss, adv_gen_loss, disc_loss):
        assert fn(l1, u1, bundle64).item() == pytest.approx(fn(l2, u2, bundle64).item(), rel=1e-12)


# ========================
# Total objective
# ========================

def test_combine_weights():
    cfg = ALConfig(lambda1=1.0, lambda2=0.5, lambda3=0.5, lambda4=1.0)
    parts = [torch.tensor(float(v)) for v in (1, 2, 3, 4, 5)]
    assert combine(*parts, cfg).total.item() == pytest.approx(11.5)
    cfg0 = ALConfig(lambda1=0.0, lambda2=0.0, lambda3=0.0, lambda4=0.0)
    assert combine(*parts, cfg0).total.item() == pytest.approx(1.0)


def test_total_matches_independent_components(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    cfg = ALConfig(beta=0.7, lambda1=1.3, lambda2=0.4, lambda3=0.6, lambda4=0.9)
    rng = Rng(21)
    shared = total_vae_loss(labeled, unlabeled, bundle64, cfg, rng)
    separate = {
        "url": url_loss(labeled, unlabeled, bundle64, cfg.beta, rng),
        "proxy_sup": proxy_sup_loss(labeled, bundle64, rng),
        "proxy_ssl": proxy_ssl_loss(unlabeled, bundle64, rng),
        "kd": kd_loss(labeled, unlabeled, bundle64),
        "adv_gen": adv_gen_loss(labeled, unlabeled, bundle64),
    }
    for name, value in separate.items():
        assert getattr(shared, name).item() == pytest.approx(value.item(), abs=1e-10)
    recombined = combine(*(separate[k] for k in ("url", "proxy_sup", "proxy_ssl", "kd", "adv_gen")), cfg)
    assert shared.total.item() == pytest.approx(recombined.total.item(), abs=1e-10)


def test_total_without_target_needs_zero_kd_weight(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    bundle64.target = None
    out = total_vae_loss(labeled, unlabeled, bundle64, ALConfig(lambda3=0.0), Rng(0))
    assert out.kd.item() == 0.0
    with pytest.raises(InvalidStateError):
        total_vae_loss(labeled, unlabeled, bundle64, ALConfig(), Rng(0))


def test_entry_points_agree_on_missing_pretext(tiny_dataset, batch_pair, bundle64):
    labeled, _ = batch_pair
    plain = make_batch(tiny_dataset, [1, 2], with_labels=False, dtype=torch.float64)
    with pytest.raises(InvalidArgumentError):
        kd_loss(labeled, plain, bundle64)
    for cfg in (ALConfig(), ALConfig(lambda2=0.0, lambda3=0.0)):
        with pytest.raises(InvalidArgumentError):
            total_vae_loss(labeled, plain, bundle64, cfg, Rng(0))


def test_breakdown_values_and_columns(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    out = total_vae_loss(labeled, unlabeled, bundle64, ALConfig(), Rng(0))
    values = out.with_disc(torch.tensor(0.5)).values()
    assert list(values) == LOSS_COLUMNS
    assert out.is_finite()
    assert all(v >= 0 for v in values.values())


# ========================
# Target learner
# ========================

def test_target_loss_uniform_logits(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    _zero_(bundle64.target.label_head, bundle64.target.rotation_head)
    assert target_loss(labeled, unlabeled, bundle64.target, 0.5).item() == pytest.approx(LN3 + 0.5 * LN6, abs=1e-9)
    assert target_loss(labeled, unlabeled, bundle64.target, 0.0).item() == pytest.approx(LN3, abs=1e-9)
    assert target_loss(labeled, None, bundle64.target, 1.0).item() == pytest.approx(LN3, abs=1e-9)


def test_target_loss_needs_pretext(tiny_dataset, batch_pair, bundle64):
    labeled, _ = batch_pair
    plain = make_batch(tiny_dataset, [1, 2], with_labels=False, dtype=torch.float64)
    with pytest.raises(InvalidArgumentError):
        target_loss(labeled, plain, bundle64.target, 1.0)


# ========================
# Gradients vs finite differences
# ========================

def test_url_gradients(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    finite_difference_check(lambda: url_loss(labeled, unlabeled, bundle64, 0.8, Rng(1)),
                            _params(bundle64.encoder, bundle64.generator))


def test_proxy_gradients(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    c = bundle64.classifier
    finite_difference_check(lambda: proxy_sup_loss(labeled, bundle64, Rng(1)),
                            _params(bundle64.encoder, c.trunk, c.label_head))
    finite_difference_check(lambda: proxy_ssl_loss(unlabeled, bundle64, Rng(1)),
                            _params(bundle64.encoder, c.trunk, c.rotation_head))


def test_kd_gradients(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    finite_difference_check(lambda: kd_loss(labeled, unlabeled, bundle64),
                            _params(bundle64.encoder, bundle64.classifier))


def test_adversarial_gradients(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    finite_difference_check(lambda: adv_gen_loss(labeled, unlabeled, bundle64), _params(bundle64.encoder))
    finite_difference_check(lambda: disc_loss(labeled, unlabeled, bundle64), _params(bundle64.discriminator))


def test_total_and_target_gradients(batch_pair, bundle64):
    labeled, unlabeled = batch_pair
    cfg = ALConfig()
    finite_difference_check(lambda: total_vae_loss(labeled, unlabeled, bundle64, cfg, Rng(4)).total,
                            _params(bundle64.encoder, bundle64.generator, bundle64.classifier))
    finite_difference_check(lambda: target_loss(labeled, unlabeled, bundle64.target, 1.0),
                            _params(bundle64.target))
