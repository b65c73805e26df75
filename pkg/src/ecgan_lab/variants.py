"""Named loss/head presets and the baseline cGAN objectives.

ECGAN variants all share the K-output energy head and differ only in which
loss weights are switched on.  ProjGAN, ACGAN and ContraGAN keep their own
discriminator designs so they can be compared against their closest ECGAN
counterparts.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .energy_core import ProjectionParams
from .losses import (
    LossWeights,
    Term,
    classification_loss,
    composite_discriminator_loss,
    composite_generator_loss,
    hinge_discriminator_loss,
    wasserstein_pair_losses,
    _t,
)

HEAD_DESIGNS = ("k_output_energy", "projection_single", "acgan_split", "single_plus_embedding")

# Weight picked from the tuning grid {1, 0.1, 0.05, 0.01}.
DEFAULT_LAMBDA_CLF = 0.1

_PRESETS: dict[str, tuple[str, dict]] = {
    "ECGAN-0": ("k_output_energy", {}),
    "ECGAN-U": ("k_output_energy", {"alpha": 1.0}),
    "ECGAN-C": ("k_output_energy", {"lambda_clf": DEFAULT_LAMBDA_CLF}),
    "ECGAN-E": ("k_output_energy", {"lambda_c": 1.0}),
    "ECGAN-UC": ("k_output_energy", {"alpha": 1.0, "lambda_clf": DEFAULT_LAMBDA_CLF}),
    "ECGAN-UCE": ("k_output_energy",
                  {"alpha": 1.0, "lambda_clf": DEFAULT_LAMBDA_CLF, "lambda_c": 1.0}),
    "ProjGAN": ("projection_single", {}),
    "ACGAN": ("acgan_split", {"lambda_g": 1.0, "lambda_d": 1.0}),
    "ContraGAN": ("single_plus_embedding", {"lambda_c": 1.0}),
}

PRESET_NAMES = tuple(_PRESETS)

# Row order used when tabulating the ablation; baselines follow the variants.
ABLATION_ORDER = {name: i for i, name in enumerate(
    ["ECGAN-0", "ECGAN-U", "ECGAN-C", "ECGAN-UC", "ECGAN-UCE", "ECGAN-E",
     "ProjGAN", "ACGAN", "ContraGAN"])}


@dataclass(frozen=True)
class VariantPreset:
    name: str
    head_design: str
    weights: LossWeights

    @property
    def uses_contrastive(self) -> bool:
        return self.weights.lambda_c > 0

    @property
    def sign_pattern(self) -> tuple[bool, bool, bool]:
        """(alpha > 0, classification weight > 0, lambda_c > 0).

        For the ACGAN head the discriminator-side classifier weight
        ``lambda_d`` plays the role of ``lambda_clf``.
        """
        w = self.weights
        clf = w.lambda_d if self.head_design == "acgan_split" else w.lambda_clf
        return (w.alpha > 0, clf > 0, w.lambda_c > 0)


def make_preset(name: str, overrides: dict | None = None) -> VariantPreset:
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; valid names: {', '.join(PRESET_NAMES)}")
    head, values = _PRESETS[name]
    values = dict(values)
    if overrides:
        unknown = set(overrides) - set(LossWeights.field_names())
        if unknown:
            raise ValueError(f"unknown loss weight override(s): {sorted(unknown)}")
        values.update(overrides)
    return VariantPreset(name=name, head_design=head, weights=LossWeights(**values))


def with_weights(preset: VariantPreset, **changes) -> VariantPreset:
    return dataclasses.replace(preset, weights=dataclasses.replace(preset.weights, **changes))


def projgan_output(proj: ProjectionParams, features, label: int) -> float:
    """Projection discriminator ``w_u.g + b_u + w_y.g``."""
    g = np.asarray(features, dtype=np.float64)
    if not 0 <= label < proj.num_classes:
        raise ValueError(f"label {label} outside [0, {proj.num_classes})")
    return float(proj.w_u @ g + proj.b_u + proj.class_embeddings[label] @ g)


def _adversarial_pair(real, fake, weights: LossWeights):
    if weights.linear_adversarial:
        return wasserstein_pair_losses(real, fake)[0]
    return hinge_discriminator_loss(real, fake, weights.margin)


def acgan_discriminator_loss(d_real, d_fake, logits_real, logits_fake,
                             labels_real, labels_fake, weights: LossWeights):
    loss = _adversarial_pair(d_real, d_fake, weights)
    if weights.lambda_d != 0:
        loss = loss + weights.lambda_d * (
            classification_loss(logits_real, labels_real)
            + classification_loss(logits_fake, labels_fake))
    return loss


def acgan_generator_loss(d_fake, logits_fake, labels_fake, weights: LossWeights):
    loss = -_t(d_fake).mean()
    if weights.lambda_g != 0:
        loss = loss + weights.lambda_g * classification_loss(logits_fake, labels_fake)
    return loss


def acgan_losses(d_real, d_fake, logits_real, logits_fake, labels_real, labels_fake,
                 weights: LossWeights):
    """ACGAN ``(L_D, L_G)`` from the unconditional output and the K classifier logits.

    ``L_G = -D(G(z)) + lambda_g CE(G(z), y)`` and
    ``L_D = adv(D(x), D(G(z))) + lambda_d (CE(x, y) + CE(G(z), y))``.
    """
    l_d = acgan_discriminator_loss(d_real, d_fake, logits_real, logits_fake,
                                   labels_real, labels_fake, weights)
    l_g = acgan_generator_loss(d_fake, logits_fake, labels_fake, weights)
    return l_d, l_g


def contragan_losses(score_real, score_fake, weights: LossWeights, *,
                     contrastive_real: Term = None, contrastive_fake: Term = None):
    """ContraGAN ``(L_D, L_G)`` on a single-output conditional score.

    Same loss shape as ECGAN-E; only the head differs.
    """
    flat = dataclasses.replace(weights, alpha=0.0, lambda_clf=0.0)
    l_d = composite_discriminator_loss(score_real, score_fake, flat,
                                       contrastive_real=contrastive_real)
    l_g = composite_generator_loss(score_fake, flat, contrastive_fake=contrastive_fake)
    return l_d, l_g
