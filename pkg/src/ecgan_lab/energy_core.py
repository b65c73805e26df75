"""K-output energy head and the quantities derived from it.

A discriminator trunk produces features ``g(x)``; the energy head maps them
to ``K`` per-class energies ``f(x)[y] = W[:, y] . g(x) + b[y]``.  The
log-sum-exp of those energies is the unconditional score ``h(x)`` and their
softmax is the class posterior.

These are plain numpy functions over immutable parameter snapshots.  The
torch modules in :mod:`ecgan_lab.networks` compute the same quantities on
tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class EnergyHeadParams:
    """Final linear layer of an energy discriminator.

    ``weight`` has shape ``(feature_dim, K)``; column ``y`` is the class
    vector ``w_y``.  ``bias`` has length ``K`` and is untied across classes.
    """

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"weight must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[1],):
            raise ValueError(f"bias shape {b.shape} does not match K={w.shape[1]}")
        if w.shape[0] < 1 or w.shape[1] < 2:
            raise ValueError("need feature_dim >= 1 and K >= 2")
        _finite("weight", w)
        _finite("bias", b)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class ProjectionParams:
    """Projection-discriminator output layer: ``(w_u + w_y) . g + b_u``."""

    w_u: np.ndarray
    b_u: float
    class_embeddings: np.ndarray  # (K, feature_dim)

    def __post_init__(self):
        w_u = np.asarray(self.w_u, dtype=np.float64)
        emb = np.asarray(self.class_embeddings, dtype=np.float64)
        if w_u.ndim != 1 or emb.ndim != 2 or emb.shape[1] != w_u.shape[0]:
            raise ValueError(
                f"w_u {w_u.shape} and class_embeddings {emb.shape} are inconsistent"
            )
        _finite("w_u", w_u)
        _finite("class_embeddings", emb)
        if not np.isfinite(self.b_u):
            raise ValueError("b_u must be finite")
        object.__setattr__(self, "w_u", w_u)
        object.__setattr__(self, "b_u", float(self.b_u))
        object.__setattr__(self, "class_embeddings", emb)

    @property
    def num_classes(self) -> int:
        return self.class_embeddings.shape[0]


def energy_scores(head: EnergyHeadParams, features) -> np.ndarray:
    """Per-class energies ``W^T g + b``.

    ``features`` may be a single vector or a ``(batch, feature_dim)`` array;
    the result has matching leading shape and a trailing axis of length K.
    """
    g = np.asarray(features, dtype=np.float64)
    if g.shape[-1:] != (head.feature_dim,):
        raise ValueError(
            f"features have trailing dim {g.shape[-1:]}, head expects {head.feature_dim}"
        )
    return g @ head.weight + head.bias


def aggregate_energy(logits) -> np.ndarray | float:
    """Stable ``log sum_y exp(logits[y])`` over the last axis."""
    f = np.asarray(logits, dtype=np.float64)
    if f.ndim == 0 or f.shape[-1] == 0:
        raise ValueError("logits must be non-empty along the class axis")
    _finite("logits", f)
    top = f.max(axis=-1, keepdims=True)
    out = np.squeeze(top, -1) + np.log(np.exp(f - top).sum(axis=-1))
    return float(out) if out.ndim == 0 else out


def log_class_posterior(logits) -> np.ndarray:
    f = np.asarray(logits, dtype=np.float64)
    lse = np.asarray(aggregate_energy(f))
    return f - lse[..., None]


def class_posterior(logits) -> np.ndarray:
    """Softmax of the energies over the last axis."""
    f = np.asarray(logits, dtype=np.float64)
    if f.ndim == 0 or f.shape[-1] == 0:
        raise ValueError("logits must be non-empty along the class axis")
    _finite("logits", f)
    e = np.exp(f - f.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def from_projection(proj: ProjectionParams) -> EnergyHeadParams:
    """Energy head reproducing a projection discriminator exactly.

    Column ``y`` becomes ``w_u + w_y`` and every class bias is tied to
    ``b_u``.  Untying the biases afterwards gives the strictly larger
    family used by the ECGAN heads.
    """
    weight = (proj.w_u[None, :] + proj.class_embeddings).T
    bias = np.full(proj.num_classes, proj.b_u)
    return EnergyHeadParams(weight=weight, bias=bias)
