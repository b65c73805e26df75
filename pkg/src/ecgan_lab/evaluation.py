"""Sample-quality metrics computable exactly at small scale.

Fréchet distance on (identity or random-conv) features stands in for FID,
its per-class average for Intra-FID, and an exponentiated KL score over an
oracle posterior for the Inception Score.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn

from .data import OracleMixture, bayes_posterior

_EIG_TOL = 1e-8


def _check_symmetric(name: str, c: np.ndarray) -> None:
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"{name} must be square, got {c.shape}")
    scale = max(1.0, float(np.abs(c).max(initial=0.0)))
    if np.abs(c - c.T).max(initial=0.0) > 1e-9 * scale:
        raise ValueError(f"{name} is not symmetric")


def _psd_sqrt(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(c)
    tol = _EIG_TOL * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol:
        raise ValueError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    # Tr (AB)^{1/2} = Tr (A^{1/2} B A^{1/2})^{1/2}
    ra = _psd_sqrt(a)
    m = ra @ b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`` for Gaussians.

    The cross term is evaluated in both argument orders and averaged, which
    makes the result exactly symmetric.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    s1, s2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    _check_symmetric("cov1", s1)
    _check_symmetric("cov2", s2)
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape[0] != mu1.shape[0]:
        raise ValueError("mean/covariance dimensions disagree")
    diff = mu1 - mu2
    cross = 0.5 * (_trace_sqrt_product(s1, s2) + _trace_sqrt_product(s2, s1))
    # fsum is correctly rounded, hence independent of argument order
    d = math.fsum([float(diff @ diff), float(np.trace(s1)), float(np.trace(s2)), -2.0 * cross])
    return max(d, 0.0)


def moments(x) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance of ``(n, d)`` features."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False, ddof=1))


def frechet_from_samples(a, b) -> float:
    return frechet_distance(*moments(a), *moments(b))


@dataclass
class IntraFrechet:
    value: float
    per_class: dict[int, float]
    missing: list[int] = field(default_factory=list)


def intra_frechet(gen_x, gen_y, ref, num_classes: int, ref_y=None) -> IntraFrechet:
    """Unweighted mean over classes of the per-class Fréchet distance.

    ``ref`` is either an :class:`OracleMixture` (exact class moments) or an
    array of reference features with labels ``ref_y``.  Classes with fewer
    than ``dim + 1`` generated (or reference) samples are left out and
    listed in ``missing``.
    """
    gen_x = np.asarray(gen_x, dtype=np.float64)
    gen_x = gen_x.reshape(len(gen_x), -1)
    gen_y = np.asarray(gen_y)
    dim = gen_x.shape[1]
    if not isinstance(ref, OracleMixture):
        ref = np.asarray(ref, dtype=np.float64)
        ref = ref.reshape(len(ref), -1)
        ref_y = np.asarray(ref_y)
    per_class, missing = {}, []
    for k in range(num_classes):
        g = gen_x[gen_y == k]
        if isinstance(ref, OracleMixture):
            ref_mu, ref_cov = ref.means[k], ref.covs[k]
            enough_ref = True
        else:
            r = ref[ref_y == k]
            enough_ref = len(r) >= dim + 1
            if enough_ref:
                ref_mu, ref_cov = moments(r)
        if len(g) < dim + 1 or not enough_ref:
            missing.append(k)
            continue
        per_class[k] = frechet_distance(*moments(g), ref_mu, ref_cov)
    value = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return IntraFrechet(value=value, per_class=per_class, missing=missing)


def condition_accuracy(labels, posterior) -> float:
    """Fraction of samples whose oracle argmax equals the conditioning label."""
    labels = np.asarray(labels)
    posterior = np.asarray(posterior)
    return float(np.mean(posterior.argmax(axis=1) == labels))


def class_coverage(posterior, num_classes: int) -> np.ndarray:
    """Share of samples the oracle assigns to each class."""
    pred = np.asarray(posterior).argmax(axis=1)
    return np.bincount(pred, minlength=num_classes) / len(pred)


def classifier_entropy_score(posterior) -> float:
    """``exp(E_x KL(p(y|x) || E_x p(y|x)))``; lies in ``[1, K]``."""
    p = np.asarray(posterior, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ValueError("need a (n >= 2, K) posterior matrix")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    kl = terms.sum(axis=1).mean()
    # mean KL equals H(marginal) - mean H(p), bounded by [0, log K] up to rounding
    kl = float(np.clip(kl, 0.0, np.log(p.shape[1])))
    return float(np.exp(kl))


# ---------------------------------------------------------------------------


class RandomConvFeatures(nn.Module):
    """Frozen, seeded, randomly initialized conv embedder for image samples.

    Only meaningful for comparing runs inside this lab; the numbers are not
    comparable with Inception-based FID.
    """

    def __init__(self, in_channels: int, dim: int = 64, seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(), nn.Linear(256, dim),
        )
        with torch.no_grad():
            for p in self.net.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * (1.0 / max(1, p[0].numel()) ** 0.5))
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x.float())


def feature_extractor_for(sample_shape: tuple[int, ...]) -> Callable[[np.ndarray], np.ndarray]:
    """Identity features for vectors, :class:`RandomConvFeatures` for images."""
    if len(sample_shape) == 1:
        return lambda x: np.asarray(x, dtype=np.float64)
    net = RandomConvFeatures(sample_shape[0])
    return lambda x: net(torch.as_tensor(np.asarray(x))).double().numpy()


@dataclass
class MetricsRecord:
    step: int
    frechet: float
    intra_frechet: float
    condition_accuracy: float | None
    classifier_entropy_score: float | None
    preset: str
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def evaluate_samples(step: int, preset: str, seed: int, gen_x, gen_y, *,
                     num_classes: int, oracle: OracleMixture | None = None,
                     ref_x=None, ref_y=None,
                     features: Callable[[np.ndarray], np.ndarray] | None = None,
                     extras: dict | None = None) -> MetricsRecord:
    """Compute a :class:`MetricsRecord` for generated samples.

    With an oracle mixture the reference moments are exact and the oracle
    posterior drives condition accuracy and the entropy score; otherwise
    reference samples are featurized and the posterior-based metrics are
    left empty.
    """
    gen_x = np.asarray(gen_x)
    if features is None:
        features = feature_extractor_for(gen_x.shape[1:])
    fg = features(gen_x)
    if oracle is not None:
        mu, cov = oracle.moments()
        fd = frechet_distance(*moments(fg), mu, cov)
        intra = intra_frechet(fg, gen_y, oracle, num_classes)
        post = bayes_posterior(oracle, fg)
        acc = condition_accuracy(gen_y, post)
        ces = classifier_entropy_score(post)
        if extras is not None:
            extras["class_coverage"] = class_coverage(post, num_classes).tolist()
    else:
        fr = features(np.asarray(ref_x))
        fd = frechet_from_samples(fg, fr)
        intra = intra_frechet(fg, gen_y, fr, num_classes, ref_y=ref_y)
        acc = ces = None
    if extras is not None:
        extras["intra_missing"] = intra.missing
    return MetricsRecord(step=step, frechet=fd, intra_frechet=intra.value,
                         condition_accuracy=acc, classifier_entropy_score=ces,
                         preset=preset, seed=seed)


def write_metrics(path: str | Path, records: Iterable[MetricsRecord], append: bool = True) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(MetricsRecord(**json.loads(line)))
    return out
