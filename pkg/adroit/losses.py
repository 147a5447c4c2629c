"""
Scalar objectives for ADROIT training
=====================================

Every function returns the quantity to *minimize*: negative log-likelihoods
plus KL terms. Reductions are batch means; sums run over pixels or logits
inside each example.

Batches carry two views. The unlabeled pool's transformed view
(``pretext_images``) feeds only the self-supervised terms and the unlabeled
half of distillation; every other term sees the untransformed images.

Noise: each function draws reparameterisation noise from fixed child streams
of the rng it receives (``labeled``, ``unlabeled``, ``pretext``), so
``total_vae_loss`` and independently recomputed components agree exactly.
"""

from dataclasses import dataclass, fields, replace
from typing import Dict, Optional

import torch
import torch.nn.functional as F
from torch.func import functional_call

from adroit.core import ALConfig, InvalidArgumentError, InvalidStateError, Rng
from adroit.data import Batch
from adroit.nets import (
    Head, LatentCode, ModelBundle, TargetLearner, classify_proxy, decode, discriminate, encode,
    reparameterize, target_forward,
)

LOSS_COLUMNS = ["url", "proxy_sup", "proxy_ssl", "kd", "adv_gen", "total", "disc"]


@dataclass
class LossBreakdown:
    """One step's VAE objective terms; ``disc`` is filled in after the discriminator update"""

    url: torch.Tensor
    proxy_sup: torch.Tensor
    proxy_ssl: torch.Tensor
    kd: torch.Tensor
    adv_gen: torch.Tensor
    total: torch.Tensor
    disc: Optional[torch.Tensor] = None

    def values(self) -> Dict[str, float]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = float("nan") if value is None else float(value.detach())
        return out

    def is_finite(self) -> bool:
        terms = (getattr(self, f.name) for f in fields(self))
        return all(bool(torch.isfinite(t)) for t in terms if t is not None)

    def with_disc(self, disc: torch.Tensor) -> "LossBreakdown":
        return replace(self, disc=disc)


def combine(url, proxy_sup, proxy_ssl, kd, adv_gen, cfg: ALConfig) -> LossBreakdown:
    """Weighted sum: url + lambda1*sup + lambda2*ssl + lambda3*kd + lambda4*adv"""
    total = url + cfg.lambda1 * proxy_sup + cfg.lambda2 * proxy_ssl + cfg.lambda3 * kd + cfg.lambda4 * adv_gen
    return LossBreakdown(url=url, proxy_sup=proxy_sup, proxy_ssl=proxy_ssl, kd=kd, adv_gen=adv_gen, total=total)


# ========================
# Primitive terms
# ========================

def kl_unit_gaussian(mu: torch.Tensor, log_variance: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, averaged over the batch"""
    if mu.shape != log_variance.shape:
        raise InvalidArgumentError(f"mean {tuple(mu.shape)} and log-variance {tuple(log_variance.shape)} differ")
    if mu.dim() == 1:
        mu, log_variance = mu.unsqueeze(0), log_variance.unsqueeze(0)
    per_example = 0.5 * (mu.pow(2) + log_variance.exp() - log_variance - 1.0).sum(dim=1)
    return per_example.mean()


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise InvalidArgumentError(f"reconstruction shape {tuple(x_hat.shape)} does not match input {tuple(x.shape)}")
    return (x_hat - x).pow(2).flatten(1).sum(dim=1).mean()


def _latent(bundle: ModelBundle, images: torch.Tensor, rng: Rng) -> LatentCode:
    mu, log_variance = encode(bundle.encoder, images)
    return reparameterize(mu, log_variance, rng)


def _require_nonempty(batch: Optional[Batch], name: str):
    if batch is None or len(batch) == 0:
        raise InvalidArgumentError(f"{name} batch must be nonempty")


def _require_labels(batch: Batch):
    if batch.labels is None:
        raise InvalidArgumentError("labeled batch carries no labels")


def _require_pretext(batch: Batch):
    if not batch.has_pretext:
        raise InvalidArgumentError("unlabeled batch carries no pretext labels")


def _require_target(bundle: ModelBundle) -> TargetLearner:
    if bundle.target is None:
        raise InvalidStateError("distillation needs a trained target learner in the bundle")
    return bundle.target


def _check_logits(student: torch.Tensor, teacher: torch.Tensor, head: Head):
    if student.shape != teacher.shape:
        raise InvalidArgumentError(
            f"{Head(head).value} head widths differ: proxy {tuple(student.shape)} vs target {tuple(teacher.shape)}"
        )


def _squared_gap(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    return (teacher - student).pow(2).sum(dim=1).mean()


def _frozen_discriminate(bundle: ModelBundle, codes: torch.Tensor) -> torch.Tensor:
    """Discriminator forward with its parameters cut from the graph"""
    disc = bundle.discriminator
    if codes.dim() != 2 or codes.shape[1] != disc.latent_dim:
        raise InvalidArgumentError(f"latent codes must be (B, {disc.latent_dim}), got {tuple(codes.shape)}")
    params = {name: p.detach() for name, p in disc.named_parameters()}
    return functional_call(disc, params, (codes,))


# ========================
# Objective terms
# ========================

def _url_side(batch: Batch, code: LatentCode, bundle: ModelBundle, beta: float) -> torch.Tensor:
    recon = reconstruction_loss(batch.images, decode(bundle.generator, code.sample))
    return recon + beta * kl_unit_gaussian(code.mean, code.log_variance)


def url_loss(labeled: Batch, unlabeled: Batch, bundle: ModelBundle, beta: float, rng: Rng) -> torch.Tensor:
    """Reconstruction plus beta-weighted KL, summed over both pools"""
    _require_nonempty(labeled, "labeled")
    _require_nonempty(unlabeled, "unlabeled")
    code_l = _latent(bundle, labeled.images, rng.child("labeled"))
    code_u = _latent(bundle, unlabeled.images, rng.child("unlabeled"))
    return _url_side(labeled, code_l, bundle, beta) + _url_side(unlabeled, code_u, bundle, beta)


def _proxy_sup(labeled: Batch, code: LatentCode, bundle: ModelBundle, include_kl: bool) -> torch.Tensor:
    ce = F.cross_entropy(classify_proxy(bundle.classifier, code.sample, Head.LABEL), labeled.labels)
    return ce + kl_unit_gaussian(code.mean, code.log_variance) if include_kl else ce


def proxy_sup_loss(labeled: Batch, bundle: ModelBundle, rng: Rng, include_kl: bool = True) -> torch.Tensor:
    """Proxy label-head cross-entropy on sampled codes, plus the posterior KL"""
    _require_labels(labeled)
    return _proxy_sup(labeled, _latent(bundle, labeled.images, rng.child("labeled")), bundle, include_kl)


def _proxy_ssl(unlabeled: Batch, code: LatentCode, bundle: ModelBundle, include_kl: bool) -> torch.Tensor:
    ce = F.cross_entropy(classify_proxy(bundle.classifier, code.sample, Head.ROTATION), unlabeled.pretext_labels)
    return ce + kl_unit_gaussian(code.mean, code.log_variance) if include_kl else ce


def proxy_ssl_loss(unlabeled: Batch, bundle: ModelBundle, rng: Rng, include_kl: bool = True) -> torch.Tensor:
    """Proxy rotation-head cross-entropy on codes of the transformed view, plus the posterior KL"""
    _require_pretext(unlabeled)
    code = _latent(bundle, unlabeled.pretext_images, rng.child("pretext"))
    return _proxy_ssl(unlabeled, code, bundle, include_kl)


def _kd(labeled: Batch, mu_l: torch.Tensor, unlabeled: Optional[Batch], mu_p: Optional[torch.Tensor],
        bundle: ModelBundle) -> torch.Tensor:
    target = _require_target(bundle)
    student = classify_proxy(bundle.classifier, mu_l, Head.LABEL)
    with torch.no_grad():
        teacher = target_forward(target, labeled.images, Head.LABEL)
    _check_logits(student, teacher, Head.LABEL)
    loss = _squared_gap(student, teacher)

    if unlabeled is not None and len(unlabeled) and mu_p is not None:
        student = classify_proxy(bundle.classifier, mu_p, Head.ROTATION)
        with torch.no_grad():
            teacher = target_forward(target, unlabeled.pretext_images, Head.ROTATION)
        _check_logits(student, teacher, Head.ROTATION)
        loss = loss + _squared_gap(student, teacher)
    return loss


def kd_loss(labeled: Batch, unlabeled: Optional[Batch], bundle: ModelBundle) -> torch.Tensor:
    """
    Squared logit gap between the frozen target learner and the proxy heads

    The proxy sees encoder means; the unlabeled side uses the transformed
    view. An absent or empty unlabeled batch contributes nothing.
    """
    _require_nonempty(labeled, "labeled")
    mu_l, _ = encode(bundle.encoder, labeled.images)
    mu_p = None
    if unlabeled is not None and len(unlabeled):
        _require_pretext(unlabeled)
        mu_p, _ = encode(bundle.encoder, unlabeled.pretext_images)
    return _kd(labeled, mu_l, unlabeled, mu_p, bundle)


def _adv_gen(bundle: ModelBundle, mu_l: torch.Tensor, mu_u: torch.Tensor) -> torch.Tensor:
    return -torch.log(_frozen_discriminate(bundle, mu_l)).mean() - torch.log(_frozen_discriminate(bundle, mu_u)).mean()


def adv_gen_loss(labeled: Batch, unlabeled: Batch, bundle: ModelBundle) -> torch.Tensor:
    """Encoder's adversarial term: make D call every code labeled; D receives no gradient"""
    _require_nonempty(labeled, "labeled")
    _require_nonempty(unlabeled, "unlabeled")
    mu_l, _ = encode(bundle.encoder, labeled.images)
    mu_u, _ = encode(bundle.encoder, unlabeled.images)
    return _adv_gen(bundle, mu_l, mu_u)


def disc_loss(labeled: Batch, unlabeled: Batch, bundle: ModelBundle) -> torch.Tensor:
    """Discriminator objective: labeled codes are class 1, unlabeled codes class 0; the encoder is constant"""
    _require_nonempty(labeled, "labeled")
    _require_nonempty(unlabeled, "unlabeled")
    with torch.no_grad():
        mu_l, _ = encode(bundle.encoder, labeled.images)
        mu_u, _ = encode(bundle.encoder, unlabeled.images)
    p_l = discriminate(bundle.discriminator, mu_l)
    p_u = discriminate(bundle.discriminator, mu_u)
    return -torch.log(p_l).mean() - torch.log(1.0 - p_u).mean()


def total_vae_loss(labeled: Batch, unlabeled: Batch, bundle: ModelBundle, cfg: ALConfig,
                   rng: Rng) -> LossBreakdown:
    """
    All VAE terms from one encoder pass per view

    Matches url_loss, proxy_sup_loss, proxy_ssl_loss, kd_loss and adv_gen_loss
    evaluated separately with the same rng. Distillation is skipped (zero) when
    lambda3 is zero and no target is attached.
    """
    _require_nonempty(labeled, "labeled")
    _require_nonempty(unlabeled, "unlabeled")
    _require_labels(labeled)
    _require_pretext(unlabeled)

    code_l = _latent(bundle, labeled.images, rng.child("labeled"))
    code_u = _latent(bundle, unlabeled.images, rng.child("unlabeled"))
    url = _url_side(labeled, code_l, bundle, cfg.beta) + _url_side(unlabeled, code_u, bundle, cfg.beta)
    sup = _proxy_sup(labeled, code_l, bundle, cfg.proxy_kl)

    code_p = _latent(bundle, unlabeled.pretext_images, rng.child("pretext"))
    ssl = _proxy_ssl(unlabeled, code_p, bundle, cfg.proxy_kl)

    if bundle.target is None and cfg.lambda3 == 0:
        kd = url.new_zeros(())
    else:
        kd = _kd(labeled, code_l.mean, unlabeled, code_p.mean, bundle)

    adv = _adv_gen(bundle, code_l.mean, code_u.mean)
    return combine(url, sup, ssl, kd, adv, cfg)


# ========================
# Target learner
# ========================

def target_loss_terms(labeled: Batch, unlabeled: Optional[Batch],
                      target: TargetLearner) -> Dict[str, torch.Tensor]:
    _require_nonempty(labeled, "labeled")
    _require_labels(labeled)
    sup = F.cross_entropy(target_forward(target, labeled.images, Head.LABEL), labeled.labels)
    if unlabeled is None or len(unlabeled) == 0:
        return {"sup": sup, "ssl": sup.new_zeros(())}
    _require_pretext(unlabeled)
    ssl = F.cross_entropy(target_forward(target, unlabeled.pretext_images, Head.ROTATION), unlabeled.pretext_labels)
    return {"sup": sup, "ssl": ssl}


def target_loss(labeled: Batch, unlabeled: Optional[Batch], target: TargetLearner, xi: float) -> torch.Tensor:
    """Supervised cross-entropy plus xi times the rotation-head cross-entropy on the unlabeled pool"""
    terms = target_loss_terms(labeled, unlabeled, target)
    return terms["sup"] + xi * terms["ssl"]
