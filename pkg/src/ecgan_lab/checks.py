"""Oracle suites behind ``ecgan-lab verify`` and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import ring_mixture, sample_mixture
from .energy_core import EnergyHeadParams, ProjectionParams, energy_scores, from_projection
from .entropy_oracle import (
    Critic,
    DiscreteJoint,
    EntropyBoundReport,
    duality_suite,
    entropy_bound_check,
    random_joint,
    unit_rows,
)
from .networks import NetConfig, count_parameters
from .trainer import TrainConfig, discriminator_loss, generator_loss, init_state
from .variants import make_preset, projgan_output

__all__ = [
    "duality_suite",
    "entropy_bound_battery",
    "equivalence_suite",
    "gradient_check",
]


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    n_parameters: int
    max_rel_error: dict[str, float]
    min_hinge_distance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())


def _central_difference(fn, params: list[torch.Tensor], h: float) -> list[torch.Tensor]:
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def _rel_error(analytic: list[torch.Tensor], numeric: list[torch.Tensor]) -> float:
    a = torch.cat([t.reshape(-1) for t in analytic])
    n = torch.cat([t.reshape(-1) for t in numeric])
    scale = max(a.abs().max().item(), n.abs().max().item(), 1e-300)
    return (a - n).abs().max().item() / scale


def gradient_check(seed: int = 0, h: float = 1e-6) -> GradCheckReport:
    """Autograd vs central differences for the full ECGAN composites.

    Uses a double-precision network under 200 parameters with every loss
    term on (alpha = lambda_c = lambda_clf = 1).  Power iteration is frozen
    (eval mode) so each loss is a fixed function of the parameters.  The
    reported error is ``max |analytic - numeric| / max |gradient|`` over all
    parameters of the differentiated network.
    """
    data = sample_mixture(ring_mixture(3, radius=1.0), 64, seed)
    preset = make_preset("ECGAN-UCE", {"alpha": 1.0, "lambda_c": 1.0, "lambda_clf": 1.0})
    net = NetConfig(data_shape=(2,), num_classes=3, feature_dim=6, hidden=(6,), noise_dim=2,
                    label_embed_dim=2, embed_dim=4)
    state = init_state(TrainConfig(n_iter=1, batch_size=8, seed=seed), preset, data, net,
                       dtype=torch.float64)
    gen, disc = state.generator, state.discriminator
    gen.eval()
    disc.eval()
    n_params = count_parameters(gen) + count_parameters(disc)

    g = torch.Generator().manual_seed(seed + 1)
    real_x = torch.as_tensor(data.x[:8])
    real_y = torch.as_tensor(data.y[:8])
    fake_y = torch.randint(0, 3, (8,), generator=g)
    z = torch.randn(8, net.noise_dim, generator=g, dtype=torch.float64)
    with torch.no_grad():
        fake_x = gen(z, fake_y)

    def l_d():
        return discriminator_loss(state, real_x, real_y, fake_x, fake_y)

    def l_g():
        return generator_loss(state, gen(z, fake_y), fake_y)

    with torch.no_grad():
        terms: dict = {}
        discriminator_loss(state, real_x, real_y, fake_x, fake_y, terms)
        a = preset.weights.alpha
        combined = torch.cat([terms["score_real"] + a * terms["uncond_real"],
                              terms["score_fake"] + a * terms["uncond_fake"]])
        m = state.preset.weights.margin
        kink = torch.minimum((m - combined[:8]).abs(), (m + combined[8:]).abs()).min().item()

    errors = {}
    for name, fn, module in (("L_D", l_d, disc), ("L_G", l_g, gen)):
        params = [p for p in module.parameters()]
        analytic = torch.autograd.grad(fn(), params)
        numeric = _central_difference(fn, params, h)
        errors[name] = _rel_error(list(analytic), numeric)
    return GradCheckReport(n_parameters=n_params, max_rel_error=errors, min_hinge_distance=kink)


# ---------------------------------------------------------------------------
# projection head vs energy head


@dataclass
class EquivalenceReport:
    trials: int
    max_discrepancy: float
    bias_changes_output: int
    module_max_discrepancy: float
    failures: list[str] = field(default_factory=list)


def equivalence_suite(trials: int = 100, seed: int = 0, tol: float = 1e-6) -> EquivalenceReport:
    """Projection output vs its energy-head construction on random triples.

    Also checks that untying one class bias changes that class's output,
    and repeats the comparison on the torch modules with shared trunks.
    """
    rng = np.random.default_rng(seed)
    worst, bias_hits, failures = 0.0, 0, []
    for t in range(trials):
        d = int(rng.integers(1, 17))
        k = int(rng.integers(2, 11))
        proj = ProjectionParams(w_u=rng.normal(size=d), b_u=float(rng.normal()),
                                class_embeddings=rng.normal(size=(k, d)))
        g = rng.normal(size=d)
        y = int(rng.integers(k))
        head = from_projection(proj)
        diff = abs(energy_scores(head, g)[y] - projgan_output(proj, g, y))
        worst = max(worst, diff)
        if diff > tol:
            failures.append(f"trial {t}: discrepancy {diff:.3e}")
        bias = head.bias.copy()
        bias[y] += float(rng.uniform(0.1, 1.0))
        untied = EnergyHeadParams(head.weight, bias)
        if energy_scores(untied, g)[y] != energy_scores(head, g)[y]:
            bias_hits += 1
        else:
            failures.append(f"trial {t}: bias perturbation had no effect")

    module_worst = _module_equivalence(seed)
    if module_worst > tol:
        failures.append(f"module discrepancy {module_worst:.3e}")
    return EquivalenceReport(trials, worst, bias_hits, module_worst, failures)


def _module_equivalence(seed: int) -> float:
    from .networks import Discriminator

    torch.manual_seed(seed)
    cfg = NetConfig(data_shape=(2,), num_classes=5, feature_dim=8, hidden=(16,),
                    spectral_norm=False)
    proj = Discriminator(cfg, "projection_single").double()
    energy = Discriminator(cfg, "k_output_energy").double()
    energy.trunk.load_state_dict(proj.trunk.state_dict())
    head = from_projection(proj.projection_params())
    with torch.no_grad():
        energy.head.weight.copy_(torch.as_tensor(head.weight.T))
        energy.head.bias.copy_(torch.as_tensor(head.bias))
        x = torch.randn(64, 2, dtype=torch.float64)
        y = torch.randint(0, 5, (64,))
        return (proj(x, y).score - energy(x, y).score).abs().max().item()


# ---------------------------------------------------------------------------
# contrastive entropy bound


def _aligned_class_embeddings(joint: DiscreteJoint, l: np.ndarray) -> np.ndarray:
    py = joint.py
    cond = np.divide(joint.table, py, out=np.zeros_like(joint.table), where=py > 0)
    e = cond.T @ l
    norm = np.linalg.norm(e, axis=1, keepdims=True)
    return np.divide(e, norm, out=np.zeros_like(e), where=norm > 0)


def battery_case(rng: np.random.Generator, index: int) -> tuple[DiscreteJoint, Critic]:
    """One joint/critic pair; cycles through identity, independent and random joints
    with random, class-aligned and self-consistent critics."""
    kind = index % 4
    if kind == 0:
        n = int(rng.integers(2, 17))
        joint = DiscreteJoint(np.eye(n) / n)
        l = unit_rows(rng, n, 8)
        return joint, Critic(l, l.copy(), float(rng.choice([0.1, 0.5, 1.0])))
    if kind == 1:
        px = rng.dirichlet(np.ones(int(rng.integers(2, 17))))
        py = rng.dirichlet(np.ones(int(rng.integers(2, 9))))
        joint = DiscreteJoint(np.outer(px, py))
    else:
        joint = random_joint(rng, int(rng.integers(2, 17)), int(rng.integers(2, 9)),
                             sharpness=float(rng.choice([0.2, 1.0])))
    nx, ny = joint.table.shape
    l = unit_rows(rng, nx, 8)
    e = _aligned_class_embeddings(joint, l) if kind == 3 else unit_rows(rng, ny, 8)
    return joint, Critic(l, e, float(rng.choice([0.1, 0.5, 1.0])))


def entropy_bound_battery(trials_per_m: int = 50, ms=(2, 8, 32), seed: int = 0,
                          batches: int = 200) -> list[EntropyBoundReport]:
    """``trials_per_m`` single-trial checks for each batch size ``M``."""
    rng = np.random.default_rng(seed)
    reports = []
    for m in ms:
        for i in range(trials_per_m):
            joint, critic = battery_case(rng, i)
            reports.append(entropy_bound_check(joint, m, 1, critic, batches=batches,
                                               seed=int(rng.integers(2**31))))
    return reports
