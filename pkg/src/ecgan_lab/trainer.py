"""Alternating discriminator/generator optimization with Adam and generator EMA."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import evaluation
from .data import LabeledData
from .losses import (
    classification_loss,
    composite_discriminator_loss,
    composite_generator_loss,
    conditional_contrastive_loss,
)
from .networks import (
    Discriminator,
    Generator,
    NetConfig,
    build_discriminator,
    build_generator,
    copy_module_into,
    ema_update_module,
    module_tensors,
    save_checkpoint,
)
from .variants import VariantPreset, acgan_discriminator_loss, acgan_generator_loss

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """A loss went non-finite; carries enough context to replay the batch."""

    def __init__(self, message: str, *, step: int, seed: int, batch_seed: int | None = None):
        super().__init__(message)
        self.step = step
        self.seed = seed
        self.batch_seed = batch_seed


@dataclass(frozen=True)
class TrainConfig:
    n_iter: int = 20_000
    n_dis: int = 2
    batch_size: int = 64
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.5
    beta2: float = 0.999
    ema_decay: float = 0.9999
    ema_start_step: int = 1_000
    eval_every: int = 1_000
    eval_samples: int = 4_000
    seed: int = 0

    def __post_init__(self):
        if self.n_iter < 0 or self.n_dis < 1:
            raise ValueError("need n_iter >= 0 and n_dis >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.eval_every < 1 or self.eval_samples < 2:
            raise ValueError("eval_every must be >= 1 and eval_samples >= 2")


def default_net_config(data: LabeledData, **overrides) -> NetConfig:
    shape = data.sample_shape
    base = dict(data_shape=shape, num_classes=data.num_classes,
                backbone="mlp" if len(shape) == 1 else "small_conv")
    if len(shape) == 1:
        base.update(feature_dim=128, hidden=(128, 128), noise_dim=16)
    else:
        base.update(feature_dim=128, hidden=(), noise_dim=64, conv_channels=64)
    base.update(overrides)
    return NetConfig(**base)


@dataclass
class TrainState:
    config: TrainConfig
    preset: VariantPreset
    net_config: NetConfig
    generator: Generator
    discriminator: Discriminator
    generator_ema: Generator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    label_marginal: np.ndarray
    rng: np.random.Generator
    noise: torch.Generator
    d_updates: int = 0
    g_updates: int = 0
    last_d_terms: dict = field(default_factory=dict)
    last_g_terms: dict = field(default_factory=dict)


def init_state(config: TrainConfig, preset: VariantPreset, data: LabeledData,
               net_config: NetConfig | None = None,
               dtype: torch.dtype = torch.float32) -> TrainState:
    net_config = net_config or default_net_config(data)
    w = preset.weights
    if w.lambda_clf > 0 and preset.head_design != "k_output_energy":
        raise ValueError(f"{preset.name}: lambda_clf needs the K-output energy head")
    if preset.head_design == "acgan_split" and (w.alpha > 0 or w.lambda_c > 0):
        raise ValueError("the ACGAN head supports only lambda_g / lambda_d")
    torch.manual_seed(config.seed)
    gen = build_generator(net_config).to(dtype)
    disc = build_discriminator(net_config, preset).to(dtype)
    gen_ema = copy.deepcopy(gen)
    gen_ema.requires_grad_(False)
    betas = (config.beta1, config.beta2)
    return TrainState(
        config=config, preset=preset, net_config=net_config,
        generator=gen, discriminator=disc, generator_ema=gen_ema,
        opt_g=torch.optim.Adam(gen.parameters(), lr=config.lr_g, betas=betas),
        opt_d=torch.optim.Adam(disc.parameters(), lr=config.lr_d, betas=betas),
        label_marginal=data.label_marginal(),
        rng=np.random.default_rng(config.seed),
        noise=torch.Generator().manual_seed(config.seed),
    )


def _dtype(state: TrainState) -> torch.dtype:
    return next(state.generator.parameters()).dtype


def sample_labels(state: TrainState, n: int) -> torch.Tensor:
    y = state.rng.choice(len(state.label_marginal), size=n, p=state.label_marginal)
    return torch.as_tensor(y, dtype=torch.long)


def sample_noise(state: TrainState, n: int) -> torch.Tensor:
    return torch.randn(n, state.net_config.noise_dim, generator=state.noise, dtype=_dtype(state))


def sample_batch(state: TrainState, data: LabeledData) -> tuple[torch.Tensor, torch.Tensor]:
    idx = state.rng.integers(0, len(data), size=state.config.batch_size)
    x = torch.as_tensor(data.x[idx], dtype=_dtype(state))
    return x, torch.as_tensor(data.y[idx], dtype=torch.long)


def _check_finite(state: TrainState, loss: torch.Tensor, which: str) -> None:
    if not torch.isfinite(loss):
        step = state.g_updates
        raise TrainingAborted(
            f"non-finite {which} loss at generator step {step} "
            f"(seed {state.config.seed}, d_updates {state.d_updates})",
            step=step, seed=state.config.seed, batch_seed=state.d_updates)


def _contrastive(disc: Discriminator, embedding, y, preset: VariantPreset):
    w = preset.weights
    return lambda: conditional_contrastive_loss(
        embedding, disc.class_embedding(y), y, w.temperature, w.contrastive_self_positive)


def discriminator_loss(state: TrainState, real_x, real_y, fake_x, fake_y, terms: dict | None = None):
    """Discriminator objective for the configured preset on one real/fake batch pair."""
    disc, preset = state.discriminator, state.preset
    out = disc(torch.cat([real_x, fake_x]), torch.cat([real_y, fake_y]))
    m = real_x.shape[0]

    def split(t):
        return (t[:m], t[m:]) if t is not None else (None, None)

    s_r, s_f = split(out.score)
    u_r, u_f = split(out.uncond)
    lg_r, lg_f = split(out.logits)
    emb_r, _ = split(out.embedding)
    if terms is not None:
        terms["score_real"] = s_r.detach().clone()
        terms["score_fake"] = s_f.detach().clone()
        if u_r is not None:
            terms["uncond_real"] = u_r.detach().clone()
            terms["uncond_fake"] = u_f.detach().clone()
    if preset.head_design == "acgan_split":
        return acgan_discriminator_loss(u_r, u_f, lg_r, lg_f, real_y, fake_y, preset.weights)
    return composite_discriminator_loss(
        s_r, s_f, preset.weights, h_real=u_r, h_fake=u_f,
        clf=(lambda: classification_loss(lg_r, real_y)) if lg_r is not None else None,
        contrastive_real=_contrastive(disc, emb_r, real_y, preset)
        if emb_r is not None else None,
        terms=terms)


def generator_loss(state: TrainState, fake_x, fake_y, terms: dict | None = None):
    disc, preset = state.discriminator, state.preset
    out = disc(fake_x, fake_y)
    if terms is not None:
        terms["score_fake"] = out.score.detach().clone()
    if preset.head_design == "acgan_split":
        return acgan_generator_loss(out.uncond, out.logits, fake_y, preset.weights)
    return composite_generator_loss(
        out.score, preset.weights, h_fake=out.uncond,
        contrastive_fake=_contrastive(disc, out.embedding, fake_y, preset)
        if out.embedding is not None else None,
        terms=terms)


def discriminator_step(state: TrainState, real_x: torch.Tensor, real_y: torch.Tensor):
    """One Adam update of the discriminator; returns ``(state, L_D)``."""
    gen, disc = state.generator, state.discriminator
    m = real_x.shape[0]
    fake_y = sample_labels(state, m)
    z = sample_noise(state, m)
    gen.eval()
    with torch.no_grad():
        fake_x = gen(z, fake_y)
    disc.train()
    terms: dict = {}
    loss = discriminator_loss(state, real_x, real_y, fake_x, fake_y, terms)
    _check_finite(state, loss, "discriminator")
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_d.step()
    state.d_updates += 1
    terms["loss"] = float(loss.detach())
    state.last_d_terms = terms
    return state, terms["loss"]


def generator_step(state: TrainState):
    """One Adam update of the generator followed by the EMA update."""
    gen, disc = state.generator, state.discriminator
    m = state.config.batch_size
    y = sample_labels(state, m)
    z = sample_noise(state, m)
    gen.train()
    disc.eval()
    disc.requires_grad_(False)
    try:
        terms: dict = {}
        loss = generator_loss(state, gen(z, y), y, terms)
        _check_finite(state, loss, "generator")
        state.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        state.opt_g.step()
    finally:
        disc.requires_grad_(True)
    state.g_updates += 1
    if state.g_updates >= state.config.ema_start_step:
        ema_update_module(state.generator_ema, gen, state.config.ema_decay)
    else:
        copy_module_into(state.generator_ema, gen)
    terms["loss"] = float(loss.detach())
    state.last_g_terms = terms
    return state, terms["loss"]


@torch.no_grad()
def generate(model: Generator, labels, noise_dim: int, seed: int, dtype=torch.float32) -> np.ndarray:
    model.eval()
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(len(y), noise_dim, generator=g, dtype=dtype)
    return model(z, y).double().numpy()


def evaluate(state: TrainState, data: LabeledData, step: int,
             extras: dict | None = None) -> evaluation.MetricsRecord:
    cfg = state.config
    rng = np.random.default_rng(cfg.seed + 7919)
    labels = rng.choice(len(state.label_marginal), size=cfg.eval_samples, p=state.label_marginal)
    x = generate(state.generator_ema, labels, state.net_config.noise_dim, cfg.seed + 7919,
                 _dtype(state))
    ref_x = ref_y = None
    if data.oracle is None:
        idx = rng.choice(len(data), size=min(len(data), cfg.eval_samples), replace=False)
        ref_x, ref_y = data.x[idx], data.y[idx]
    return evaluation.evaluate_samples(
        step, state.preset.name, cfg.seed, x, labels, num_classes=data.num_classes,
        oracle=data.oracle, ref_x=ref_x, ref_y=ref_y, extras=extras)


@dataclass
class TrainResult:
    state: TrainState
    history: list[evaluation.MetricsRecord]
    best: evaluation.MetricsRecord | None
    d_losses: list[float]
    g_losses: list[float]
    extras: list[dict] = field(default_factory=list)


def checkpoint_tensors(state: TrainState) -> dict:
    out = {}
    out.update(module_tensors("generator", state.generator))
    out.update(module_tensors("generator_ema", state.generator_ema))
    out.update(module_tensors("discriminator", state.discriminator))
    out["counters"] = np.array([state.d_updates, state.g_updates], dtype=np.int64)
    return out


def train(config: TrainConfig, preset: VariantPreset, data: LabeledData, *,
          net_config: NetConfig | None = None, out_dir: str | Path | None = None,
          on_eval: Callable[[evaluation.MetricsRecord], None] | None = None) -> TrainResult:
    """Run ``n_iter`` outer iterations of ``n_dis`` discriminator steps and one
    generator step, evaluating the averaged generator every ``eval_every``.

    With ``out_dir`` the metrics stream goes to ``metrics.jsonl`` as it is
    produced; ``best.npz`` holds the lowest-Fréchet checkpoint (ties go to
    the later step) and ``last.npz`` the final state.  On abort the last
    state is flushed to ``aborted.npz`` before the error propagates.
    """
    state = init_state(config, preset, data, net_config)
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")
    result = TrainResult(state, [], None, [], [])
    try:
        for it in range(config.n_iter):
            for _ in range(config.n_dis):
                x, y = sample_batch(state, data)
                _, ld = discriminator_step(state, x, y)
                result.d_losses.append(ld)
            _, lg = generator_step(state)
            result.g_losses.append(lg)
            step = it + 1
            if step % config.eval_every == 0:
                extras: dict = {}
                rec = evaluate(state, data, step, extras)
                result.history.append(rec)
                result.extras.append(extras)
                log.info("step %d frechet %.4f intra %.4f acc %s", step, rec.frechet,
                         rec.intra_frechet, rec.condition_accuracy)
                if metrics_path is not None:
                    evaluation.write_metrics(metrics_path, [rec])
                if result.best is None or _better_or_equal(rec, result.best):
                    result.best = rec
                    if out is not None:
                        save_checkpoint(out / "best.npz", checkpoint_tensors(state))
                if on_eval is not None:
                    on_eval(rec)
    except TrainingAborted:
        if out is not None:
            save_checkpoint(out / "aborted.npz", checkpoint_tensors(state))
        raise
    if out is not None:
        save_checkpoint(out / "last.npz", checkpoint_tensors(state))
    return result


def _better_or_equal(a: evaluation.MetricsRecord, b: evaluation.MetricsRecord) -> bool:
    fa, fb = a.frechet, b.frechet
    if math.isnan(fb):
        return True
    return fa <= fb
