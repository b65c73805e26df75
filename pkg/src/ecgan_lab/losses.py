"""Scalar loss components and the composite ECGAN objectives.

Every function takes torch tensors (or plain floats) holding per-sample
values and reduces over the batch with an arithmetic mean.  Composites
accept optional terms either as tensors or as zero-argument callables; a
term whose weight is zero is never evaluated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Union

import torch
import torch.nn.functional as F

Term = Union[torch.Tensor, float, Callable[[], torch.Tensor], None]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0
    lambda_c: float = 0.0
    lambda_clf: float = 0.0
    # only used by the ACGAN baseline
    lambda_g: float = 0.0
    lambda_d: float = 0.0
    temperature: float = 1.0
    margin: float = 1.0
    combined_hinge: bool = True
    # use the linear (Wasserstein) adversarial form instead of the hinge
    linear_adversarial: bool = False
    # count k == i among the positives of the contrastive numerator
    contrastive_self_positive: bool = True
    # subtract the contrastive term instead of adding it
    negate_contrastive: bool = False

    def __post_init__(self):
        for name in ("alpha", "lambda_c", "lambda_clf", "lambda_g", "lambda_d"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not (math.isfinite(self.margin) and self.margin > 0):
            raise ValueError(f"margin must be > 0, got {self.margin}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _resolve(term: Term) -> torch.Tensor:
    if callable(term):
        term = term()
    if term is None:
        raise ValueError("a loss term with nonzero weight was not supplied")
    return _t(term)


def wasserstein_pair_losses(real_score, fake_score):
    """Linear adversarial pair: ``(-real + fake, -fake)`` batch means."""
    real, fake = _t(real_score), _t(fake_score)
    d_loss = -real.mean() + fake.mean()
    g_loss = -fake.mean()
    return d_loss, g_loss


def hinge_discriminator_loss(real_score, fake_score, margin: float = 1.0):
    """Geometric-GAN hinge: ``mean relu(m - real) + mean relu(m + fake)``."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    real, fake = _t(real_score), _t(fake_score)
    return F.relu(margin - real).mean() + F.relu(margin + fake).mean()


def combined_adversarial_scores(f_y, h, alpha: float):
    """Score ``f(x)[y] + alpha * h(x)`` fed jointly into the hinge."""
    f_y = _t(f_y)
    if alpha == 0:
        return f_y
    return f_y + alpha * _t(h)


def adversarial_discriminator_loss(f_real, f_fake, h_real: Term, h_fake: Term,
                                   weights: LossWeights):
    """Discriminator adversarial term for the conditional and unconditional scores.

    With ``combined_hinge`` the hinge is applied once to ``f + alpha*h``;
    otherwise two hinges are summed, ``hinge(f) + alpha * hinge(h)``.
    """
    alpha = weights.alpha
    if weights.linear_adversarial:
        real = combined_adversarial_scores(f_real, None if alpha == 0 else _resolve(h_real), alpha)
        fake = combined_adversarial_scores(f_fake, None if alpha == 0 else _resolve(h_fake), alpha)
        return wasserstein_pair_losses(real, fake)[0]
    if weights.combined_hinge:
        real = combined_adversarial_scores(f_real, None if alpha == 0 else _resolve(h_real), alpha)
        fake = combined_adversarial_scores(f_fake, None if alpha == 0 else _resolve(h_fake), alpha)
        return hinge_discriminator_loss(real, fake, weights.margin)
    loss = hinge_discriminator_loss(f_real, f_fake, weights.margin)
    if alpha != 0:
        loss = loss + alpha * hinge_discriminator_loss(
            _resolve(h_real), _resolve(h_fake), weights.margin)
    return loss


def generator_adversarial_loss(f_fake_y, h_fake: Term, alpha: float):
    """``mean(-f_fake_y) - alpha * mean(h_fake)``; never hinged."""
    loss = -_t(f_fake_y).mean()
    if alpha != 0:
        loss = loss - alpha * _resolve(h_fake).mean()
    return loss


def classification_loss(logits, labels):
    """Softmax cross-entropy computed through log-sum-exp.

    ``logits`` is ``(K,)`` or ``(batch, K)``; ``labels`` are 0-based.
    """
    f = _t(logits)
    if f.ndim == 1:
        f = f.unsqueeze(0)
    y = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    k = f.shape[-1]
    if y.shape[0] != f.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {f.shape[0]} logit rows")
    if torch.any((y < 0) | (y >= k)):
        raise ValueError(f"labels must lie in [0, {k})")
    picked = f.gather(1, y[:, None]).squeeze(1)
    return (torch.logsumexp(f, dim=1) - picked).mean()


def conditional_contrastive_loss(sample_embeddings, class_embeddings, labels,
                                 temperature: float = 1.0,
                                 self_positive: bool = True):
    """Mean over ``i`` of ``log(positive mass / total mass)``.

    With ``d(a, b) = exp(a.b / t)``, the numerator for anchor ``i`` is
    ``d(l_i, e_i) + sum_k [y_k = y_i] d(l_i, l_k)`` and the denominator is
    ``d(l_i, e_i) + sum_{k != i} d(l_i, l_k)``.  ``self_positive`` decides
    whether ``k = i`` counts in the numerator sum.  Evaluated in log space.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    l = _t(sample_embeddings)
    e = _t(class_embeddings)
    y = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    m = l.shape[0]
    if m < 1 or e.shape != l.shape or y.shape[0] != m:
        raise ValueError("sample embeddings, class embeddings and labels must align")

    anchor = (l * e).sum(dim=1, keepdim=True) / temperature  # (m, 1)
    sims = l @ l.T / temperature  # (m, m)
    eye = torch.eye(m, dtype=torch.bool, device=l.device)
    same = y[:, None] == y[None, :]
    if not self_positive:
        same = same & ~eye
    neg_inf = torch.tensor(float("-inf"), dtype=sims.dtype, device=sims.device)
    num = torch.logsumexp(torch.cat([anchor, torch.where(same, sims, neg_inf)], dim=1), dim=1)
    den = torch.logsumexp(torch.cat([anchor, torch.where(~eye, sims, neg_inf)], dim=1), dim=1)
    return (num - den).mean()


def _contrastive_sign(weights: LossWeights) -> float:
    return -1.0 if weights.negate_contrastive else 1.0


def composite_discriminator_loss(f_real, f_fake, weights: LossWeights, *,
                                 h_real: Term = None, h_fake: Term = None,
                                 clf: Term = None, contrastive_real: Term = None,
                                 terms: dict | None = None):
    """``adv + lambda_c * L_C(real) + lambda_clf * L_clf``.

    ``terms``, when given, receives the float value of every active part.
    """
    adv = adversarial_discriminator_loss(f_real, f_fake, h_real, h_fake, weights)
    total = adv
    if terms is not None:
        terms["adv"] = float(adv.detach())
    if weights.lambda_c != 0:
        lc = _resolve(contrastive_real)
        total = total + _contrastive_sign(weights) * weights.lambda_c * lc
        if terms is not None:
            terms["contrastive"] = float(lc.detach())
    if weights.lambda_clf != 0:
        lclf = _resolve(clf)
        total = total + weights.lambda_clf * lclf
        if terms is not None:
            terms["clf"] = float(lclf.detach())
    return total


def composite_generator_loss(f_fake, weights: LossWeights, *, h_fake: Term = None,
                             contrastive_fake: Term = None,
                             terms: dict | None = None):
    """``-f_fake - alpha * h_fake + lambda_c * L_C(fake)``."""
    adv = generator_adversarial_loss(f_fake, h_fake, weights.alpha)
    total = adv
    if terms is not None:
        terms["adv"] = float(adv.detach())
    if weights.lambda_c != 0:
        lc = _resolve(contrastive_fake)
        total = total + _contrastive_sign(weights) * weights.lambda_c * lc
        if terms is not None:
            terms["contrastive"] = float(lc.detach())
    return total
