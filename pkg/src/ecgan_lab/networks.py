"""Small conditional generator/discriminator backbones, spectral norm and EMA."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, MutableMapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize

from .energy_core import EnergyHeadParams, ProjectionParams
from .variants import HEAD_DESIGNS, VariantPreset

# ---------------------------------------------------------------------------
# spectral normalization


@dataclass
class PowerIterationState:
    """Persistent left/right singular vector estimates for one weight."""

    u: torch.Tensor
    v: torch.Tensor

    @classmethod
    def init(cls, shape: tuple[int, int], seed: int = 0, dtype=torch.float64):
        g = torch.Generator().manual_seed(seed)
        u = F.normalize(torch.randn(shape[0], generator=g, dtype=dtype), dim=0)
        v = F.normalize(torch.randn(shape[1], generator=g, dtype=dtype), dim=0)
        return cls(u, v)


def _power_iteration(w: torch.Tensor, u: torch.Tensor, v: torch.Tensor, n_iters: int,
                     eps: float = 1e-12) -> None:
    with torch.no_grad():
        for _ in range(n_iters):
            v.copy_(F.normalize(w.T @ u, dim=0, eps=eps))
            u.copy_(F.normalize(w @ v, dim=0, eps=eps))


def spectral_normalize(weight, state: PowerIterationState | None = None,
                       n_iters: int = 1):
    """Divide ``weight`` by the power-iteration estimate of its top singular value.

    ``state`` is updated in place, so repeated calls refine the estimate.
    Weights with more than two dimensions are flattened to
    ``(shape[0], -1)`` for the estimate.  Accepts numpy arrays or tensors
    and returns the same kind.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be positive")
    as_numpy = not isinstance(weight, torch.Tensor)
    w = torch.as_tensor(np.asarray(weight, dtype=np.float64)) if as_numpy else weight
    mat = w.reshape(w.shape[0], -1)
    if not torch.any(mat != 0):
        raise ValueError("cannot spectrally normalize a zero matrix")
    if state is None:
        state = PowerIterationState.init(tuple(mat.shape), dtype=mat.dtype)
    _power_iteration(mat.detach(), state.u, state.v, n_iters)
    sigma = torch.dot(state.u, mat @ state.v)
    out = w / sigma
    return out.numpy() if as_numpy else out


class SpectralNorm(nn.Module):
    """Parametrization applying :func:`spectral_normalize` to a layer weight.

    One power iteration runs per forward pass in training mode; in eval mode
    the stored vectors are reused so the map is a fixed differentiable
    function of the weight.
    """

    def __init__(self, weight: torch.Tensor, n_iters: int = 1):
        super().__init__()
        mat = weight.detach().reshape(weight.shape[0], -1)
        self.n_iters = n_iters
        self.register_buffer("u", F.normalize(torch.randn(mat.shape[0], dtype=mat.dtype), dim=0))
        self.register_buffer("v", F.normalize(torch.randn(mat.shape[1], dtype=mat.dtype), dim=0))
        _power_iteration(mat, self.u, self.v, 15)

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        mat = weight.reshape(weight.shape[0], -1)
        if self.training:
            _power_iteration(mat.detach(), self.u, self.v, self.n_iters)
        sigma = torch.dot(self.u, mat @ self.v)
        return weight / sigma


def _sn(module: nn.Module, enabled: bool) -> nn.Module:
    if enabled:
        parametrize.register_parametrization(module, "weight", SpectralNorm(module.weight))
    return module


# ---------------------------------------------------------------------------
# parameter averaging


def ema_update(avg: MutableMapping, current: Mapping, decay: float) -> MutableMapping:
    """In place ``avg <- decay * avg + (1 - decay) * current`` for every entry."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    if set(avg) != set(current):
        raise ValueError("parameter names differ between average and current")
    for name, a in avg.items():
        c = current[name]
        if tuple(a.shape) != tuple(c.shape):
            raise ValueError(f"shape mismatch for {name}: {tuple(a.shape)} vs {tuple(c.shape)}")
        # a + (1 - decay)(c - a): exact fixed point when c == a
        if isinstance(a, torch.Tensor):
            with torch.no_grad():
                a.lerp_(c.detach(), 1.0 - decay)
        else:
            a += (1.0 - decay) * (c - a)
    return avg


def ema_update_module(avg_model: nn.Module, model: nn.Module, decay: float) -> None:
    """Average parameters; buffers (power-iteration vectors) are copied."""
    ema_update(dict(avg_model.named_parameters()), dict(model.named_parameters()), decay)
    with torch.no_grad():
        for (_, b_avg), (_, b) in zip(avg_model.named_buffers(), model.named_buffers()):
            b_avg.copy_(b)


def copy_module_into(dst: nn.Module, src: nn.Module) -> None:
    dst.load_state_dict(src.state_dict())


# ---------------------------------------------------------------------------
# backbones


@dataclass(frozen=True)
class NetConfig:
    data_shape: tuple[int, ...]
    num_classes: int
    backbone: str = "mlp"
    feature_dim: int = 128
    noise_dim: int = 16
    hidden: tuple[int, ...] = (128, 128)
    spectral_norm: bool = True
    label_embed_dim: int = 16
    # width of the contrastive projection l(x) and class embedding e(y)
    embed_dim: int = 64
    normalize_embeddings: bool = True
    conv_channels: int = 64
    conditioning: str = "concat_embedding"

    def __post_init__(self):
        object.__setattr__(self, "data_shape", tuple(int(s) for s in self.data_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.backbone not in ("mlp", "small_conv"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.conditioning != "concat_embedding":
            raise ValueError(f"unsupported conditioning {self.conditioning!r}")
        for name in ("feature_dim", "noise_dim", "label_embed_dim", "embed_dim",
                     "conv_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")
        if not self.data_shape or any(s < 1 for s in self.data_shape):
            raise ValueError(f"bad data shape {self.data_shape}")
        if self.backbone == "mlp" and len(self.data_shape) != 1:
            raise ValueError("mlp backbone expects flat vector data")
        if self.backbone == "small_conv":
            if len(self.data_shape) != 3:
                raise ValueError("small_conv expects (C, H, W) data")
            _, h, w = self.data_shape
            if h != w or h < 4 or h > 32 or (h & (h - 1)):
                raise ValueError("small_conv expects square power-of-two images in [4, 32]")

    @property
    def data_dim(self) -> int:
        return math.prod(self.data_shape)


def _mlp(sizes: list[int], sn: bool, act: nn.Module) -> list[nn.Module]:
    layers: list[nn.Module] = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers += [_sn(nn.Linear(a, b), sn), copy.deepcopy(act)]
    return layers


class Generator(nn.Module):
    """Maps ``(z, y)`` to a sample; the label embedding is concatenated to ``z``."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.num_classes, cfg.label_embed_dim)
        in_dim = cfg.noise_dim + cfg.label_embed_dim
        if cfg.backbone == "mlp":
            sizes = [in_dim, *cfg.hidden]
            self.body = nn.Sequential(
                *_mlp(sizes, cfg.spectral_norm, nn.ReLU()),
                _sn(nn.Linear(sizes[-1], cfg.data_dim), cfg.spectral_norm),
            )
        else:
            c, h, _ = cfg.data_shape
            ch = cfg.conv_channels
            n_up = int(math.log2(h // 4)) if h >= 4 else 0
            blocks: list[nn.Module] = [
                _sn(nn.Linear(in_dim, ch * 16), cfg.spectral_norm), nn.ReLU(),
                nn.Unflatten(1, (ch, 4, 4)),
            ]
            for _ in range(n_up):
                blocks += [nn.Upsample(scale_factor=2),
                           _sn(nn.Conv2d(ch, ch, 3, padding=1), cfg.spectral_norm), nn.ReLU()]
            blocks += [_sn(nn.Conv2d(ch, c, 3, padding=1), cfg.spectral_norm), nn.Tanh()]
            self.body = nn.Sequential(*blocks)

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        out = self.body(torch.cat([z, self.embed(y)], dim=1))
        return out.reshape(z.shape[0], *self.cfg.data_shape)


@dataclass
class DiscOutput:
    """What a discriminator forward pass exposes to the losses.

    ``score`` is the conditional score D(x, y) (for the ACGAN head, the
    unconditional output).  ``uncond`` is h(x) for the energy head, the
    unconditional linear term for projection heads, and D(x) for ACGAN.
    ``logits`` are the K energies or the K classifier logits (ACGAN).
    """

    features: torch.Tensor
    score: torch.Tensor
    uncond: torch.Tensor | None = None
    logits: torch.Tensor | None = None
    embedding: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


class Discriminator(nn.Module):
    def __init__(self, cfg: NetConfig, head_design: str, contrastive: bool = False):
        super().__init__()
        if head_design not in HEAD_DESIGNS:
            raise ValueError(f"unknown head design {head_design!r}")
        self.cfg = cfg
        self.head_design = head_design
        sn = cfg.spectral_norm
        k, d = cfg.num_classes, cfg.feature_dim
        act = nn.LeakyReLU(0.2)
        if cfg.backbone == "mlp":
            sizes = [cfg.data_dim, *cfg.hidden]
            self.trunk = nn.Sequential(
                *_mlp(sizes, sn, act), _sn(nn.Linear(sizes[-1], d), sn), copy.deepcopy(act))
        else:
            c, h, _ = cfg.data_shape
            ch = cfg.conv_channels
            layers: list[nn.Module] = [_sn(nn.Conv2d(c, ch, 3, padding=1), sn), copy.deepcopy(act)]
            size = h
            while size > 4:
                layers += [_sn(nn.Conv2d(ch, ch, 4, stride=2, padding=1), sn), copy.deepcopy(act)]
                size //= 2
            layers += [nn.Flatten(), _sn(nn.Linear(ch * size * size, d), sn), copy.deepcopy(act)]
            self.trunk = nn.Sequential(*layers)

        if head_design == "k_output_energy":
            self.head = _sn(nn.Linear(d, k), sn)
        elif head_design == "acgan_split":
            self.head = _sn(nn.Linear(d, k + 1), sn)
        else:
            self.head = _sn(nn.Linear(d, 1), sn)
            self.class_proj = _sn(nn.Embedding(k, d), sn)

        self.contrastive = contrastive or head_design == "single_plus_embedding"
        if self.contrastive:
            self.sample_proj = _sn(nn.Linear(d, cfg.embed_dim), sn)
            self.class_embed = _sn(nn.Embedding(k, cfg.embed_dim), sn)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if self.cfg.backbone == "mlp":
            x = x.reshape(x.shape[0], -1)
        return self.trunk(x)

    def class_embedding(self, y: torch.Tensor) -> torch.Tensor:
        e = self.class_embed(y)
        return F.normalize(e, dim=1) if self.cfg.normalize_embeddings else e

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> DiscOutput:
        g = self.features(x)
        if self.head_design == "k_output_energy":
            logits = self.head(g)
            out = DiscOutput(features=g, logits=logits,
                             score=logits.gather(1, y[:, None]).squeeze(1),
                             uncond=torch.logsumexp(logits, dim=1))
        elif self.head_design == "acgan_split":
            o = self.head(g)
            out = DiscOutput(features=g, score=o[:, 0], uncond=o[:, 0], logits=o[:, 1:])
        else:
            u = self.head(g).squeeze(1)
            out = DiscOutput(features=g, uncond=u,
                             score=u + (self.class_proj(y) * g).sum(dim=1))
        if self.contrastive:
            emb = self.sample_proj(g)
            out.embedding = F.normalize(emb, dim=1) if self.cfg.normalize_embeddings else emb
        return out

    # -- plain-array views of the output layer, used by the equivalence checks

    def energy_head_params(self) -> EnergyHeadParams:
        if self.head_design != "k_output_energy":
            raise ValueError("not an energy head")
        return EnergyHeadParams(weight=self.head.weight.detach().double().numpy().T,
                                bias=self.head.bias.detach().double().numpy())

    def projection_params(self) -> ProjectionParams:
        if self.head_design not in ("projection_single", "single_plus_embedding"):
            raise ValueError("not a projection head")
        return ProjectionParams(w_u=self.head.weight.detach().double().numpy()[0],
                                b_u=float(self.head.bias.detach()),
                                class_embeddings=self.class_proj.weight.detach().double().numpy())


def build_generator(config: NetConfig) -> Generator:
    return Generator(config)


def build_discriminator(config: NetConfig, preset: VariantPreset) -> Discriminator:
    return Discriminator(config, preset.head_design, contrastive=preset.uses_contrastive)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a single .npz archive: one entry per named tensor, stored
# little-endian and row-major (C order) with its shape.  Nested module
# states are flattened with "<prefix>/<state_dict key>" names.


def save_checkpoint(path: str | Path, tensors: Mapping[str, object]) -> Path:
    path = Path(path)
    arrays = {}
    for name, t in tensors.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if a.dtype.kind == "f":
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        elif a.dtype.kind in "iu":
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        arrays[name] = np.ascontiguousarray(a)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(Path(path), allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


def module_tensors(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def load_module_tensors(prefix: str, module: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    n = len(prefix) + 1
    state = {k[n:]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
             if k.startswith(prefix + "/")}
    module.load_state_dict(state)
