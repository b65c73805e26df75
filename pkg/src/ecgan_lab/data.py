"""Class-conditional datasets: Gaussian mixtures with an exact Bayes oracle,
and small 8-bit image sets.

Class labels are 0-based throughout.

Binary record file layout (all integers little-endian)::

    header   5 x uint32   K, count, H, W, C
    record   1 x uint8    label
             H*W*C uint8  pixels, row-major (H, W, C)

repeated ``count`` times, nothing after the last record.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

_HEADER = struct.Struct("<5I")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}


@dataclass(frozen=True)
class OracleMixture:
    """One Gaussian component per class: ``x | y ~ N(means[y], covs[y])``."""

    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    priors: np.ndarray  # (K,)

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64)
        priors = np.asarray(self.priors, dtype=np.float64)
        k, d = means.shape
        if covs.shape != (k, d, d) or priors.shape != (k,):
            raise ValueError("means, covs and priors have inconsistent shapes")
        if np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-12:
            raise ValueError("priors must be nonnegative and sum to 1")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2)):
            raise ValueError("covariances must be symmetric")
        for c in covs:
            np.linalg.cholesky(c)  # raises LinAlgError if not positive-definite
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "priors", priors)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the marginal p(x)."""
        mu = self.priors @ self.means
        second = np.einsum("k,kij->ij", self.priors, self.covs) + np.einsum(
            "k,ki,kj->ij", self.priors, self.means, self.means)
        return mu, second - np.outer(mu, mu)


def ring_mixture(num_classes: int = 8, radius: float = 5.0, variance: float = 0.25) -> OracleMixture:
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    covs = np.repeat(variance * np.eye(2)[None], num_classes, axis=0)
    return OracleMixture(means, covs, np.full(num_classes, 1.0 / num_classes))


@dataclass
class LabeledData:
    x: np.ndarray  # (n, *sample_shape)
    y: np.ndarray  # (n,) int64
    num_classes: int
    oracle: OracleMixture | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def label_marginal(self) -> np.ndarray:
        counts = np.bincount(self.y, minlength=self.num_classes).astype(np.float64)
        return counts / counts.sum()


def sample_mixture(mix: OracleMixture, n: int, seed: int) -> LabeledData:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    y = rng.choice(mix.num_classes, size=n, p=mix.priors)
    chol = np.linalg.cholesky(mix.covs)
    eps = rng.standard_normal((n, mix.dim))
    x = mix.means[y] + np.einsum("nij,nj->ni", chol[y], eps)
    return LabeledData(x=x, y=y, num_classes=mix.num_classes, oracle=mix)


def mixture_log_joint(mix: OracleMixture, x) -> np.ndarray:
    """``log p(x, y)`` for every class, shape ``(n, K)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty((x.shape[0], mix.num_classes))
    for k in range(mix.num_classes):
        chol = np.linalg.cholesky(mix.covs[k])
        diff = np.linalg.solve(chol, (x - mix.means[k]).T)
        maha = (diff ** 2).sum(axis=0)
        logdet = 2 * np.log(np.diag(chol)).sum()
        out[:, k] = (np.log(mix.priors[k]) - 0.5 * (maha + logdet + mix.dim * np.log(2 * np.pi)))
    return out


def bayes_posterior(mix: OracleMixture, x) -> np.ndarray:
    """Exact ``p(y | x)`` under the mixture, shape ``(n, K)``."""
    lj = mixture_log_joint(mix, x)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# image data


def write_record_file(path: str | Path, pixels: np.ndarray, labels, num_classes: int) -> Path:
    """Write ``(n, H, W, C)`` uint8 pixels with labels in the binary record layout."""
    pixels = np.asarray(pixels)
    labels = np.asarray(labels)
    if pixels.dtype != np.uint8 or pixels.ndim != 4:
        raise ValueError("pixels must be a (n, H, W, C) uint8 array")
    if len(labels) != len(pixels) or (len(labels) and (labels.min() < 0 or labels.max() >= num_classes)):
        raise ValueError("labels must align with pixels and lie in [0, K)")
    if num_classes > 256:
        raise ValueError("labels are stored as single bytes")
    n, h, w, c = pixels.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(num_classes, n, h, w, c))
        for lab, img in zip(labels, pixels):
            fh.write(bytes([int(lab)]))
            fh.write(np.ascontiguousarray(img).tobytes())
    return path


def read_record_file(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    """Return ``(pixels (n, H, W, C) uint8, labels, K)`` from a record file."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header at byte offset {len(raw)}")
    k, n, h, w, c = _HEADER.unpack_from(raw, 0)
    if k < 1 or k > 256 or h < 1 or w < 1 or c < 1:
        raise ValueError(f"{path}: invalid header values at byte offset 0: {(k, n, h, w, c)}")
    rec = 1 + h * w * c
    expected = _HEADER.size + n * rec
    if len(raw) < expected:
        last_full = (len(raw) - _HEADER.size) // rec
        offset = _HEADER.size + last_full * rec
        raise ValueError(f"{path}: truncated record {last_full} at byte offset {offset}")
    if len(raw) > expected:
        raise ValueError(f"{path}: {len(raw) - expected} trailing bytes at byte offset {expected}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec)
    labels = body[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= k)[0]
    if bad.size:
        offset = _HEADER.size + int(bad[0]) * rec
        raise ValueError(f"{path}: label {labels[bad[0]]} >= K={k} at byte offset {offset}")
    pixels = body[:, 1:].reshape(n, h, w, c).copy()
    return pixels, labels, k


def _read_image_folder(root: Path) -> tuple[np.ndarray, np.ndarray, int]:
    from PIL import Image

    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"{root}: no class subdirectories")
    images, labels = [], []
    shape = None
    for label, cdir in enumerate(classes):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(f) as im:
                arr = np.asarray(im)
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if arr.dtype != np.uint8:
                raise ValueError(f"{f}: expected 8-bit image, got {arr.dtype}")
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"{f}: shape {arr.shape} differs from {shape}")
            images.append(arr)
            labels.append(label)
    if not images:
        raise ValueError(f"{root}: no images found")
    return np.stack(images), np.asarray(labels, dtype=np.int64), len(classes)


def load_image_dataset(path: str | Path) -> LabeledData:
    """Load a per-class image folder tree or a binary record file.

    Samples come back channel-first ``(n, C, H, W)`` float32 in ``[-1, 1]``.
    """
    path = Path(path)
    if path.is_dir():
        pixels, labels, k = _read_image_folder(path)
    elif path.is_file():
        pixels, labels, k = read_record_file(path)
    else:
        raise ValueError(f"{path}: no such dataset")
    if len(pixels) == 0:
        raise ValueError(f"{path}: dataset is empty")
    x = pixels.astype(np.float32) / 127.5 - 1.0
    return LabeledData(x=np.ascontiguousarray(x.transpose(0, 3, 1, 2)), y=labels, num_classes=k)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Inverse of the [-1, 1] normalization for ``(n, C, H, W)`` samples."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(0, 2, 3, 1)


DATASETS = ("ring8",)


def make_dataset(spec: str, n: int = 50_000, seed: int = 0) -> LabeledData:
    """Resolve a dataset name (``ring8``, ``ringK``) or a path to image data."""
    if spec.startswith("ring") and spec[4:].isdigit():
        return sample_mixture(ring_mixture(int(spec[4:])), n, seed)
    return load_image_dataset(spec)
