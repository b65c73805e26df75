"""Finite-domain checks of the variational log-partition identity and of the
contrastive entropy lower bound.

Everything here is exact enumeration or plain Monte Carlo over small
discrete tables, kept separate from the training code paths it validates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy


@dataclass(frozen=True)
class PartitionInstance:
    """Energies on a finite domain: ``(n,)`` or a per-class ``(n, K)`` table."""

    energies: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.energies, dtype=np.float64)
        if f.ndim not in (1, 2) or f.shape[0] < 1:
            raise ValueError(f"energies must be (n,) or (n, K) with n >= 1, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("energies must be finite")
        object.__setattr__(self, "energies", f)

    @property
    def size(self) -> int:
        return self.energies.shape[0]

    def column(self, y: int | None) -> np.ndarray:
        if self.energies.ndim == 1:
            if y is not None:
                raise ValueError("instance has no per-class table")
            return self.energies
        if y is None:
            raise ValueError("per-class instance needs a class index")
        return self.energies[:, y]


def brute_force_log_partition(inst: PartitionInstance, y: int | None = None) -> float:
    """``log sum_x exp f(x)`` by direct (compensated) summation."""
    f = inst.column(y)
    top = float(f.max())
    return top + math.log(math.fsum(math.exp(v - top) for v in f))


def gibbs(inst: PartitionInstance, y: int | None = None) -> np.ndarray:
    f = inst.column(y)
    w = np.exp(f - f.max())
    return w / w.sum()


def entropy(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return -xlogy(q, q).sum(axis=-1)


def kl_divergence(q, p) -> np.ndarray:
    """``sum q log(q / p)`` along the last axis, with ``0 log 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return (xlogy(q, q) - xlogy(q, p)).sum(axis=-1)


def _check_distribution(q: np.ndarray, n: int) -> None:
    if q.shape[-1] != n:
        raise ValueError(f"distribution has {q.shape[-1]} entries, domain has {n}")
    if np.any(~np.isfinite(q)) or np.any(q < 0):
        raise ValueError("distribution entries must be finite and nonnegative")
    if np.any(np.abs(q.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("distribution must sum to 1")


def variational_objective(q, inst: PartitionInstance, y: int | None = None) -> np.ndarray:
    """``E_q[f] + H(q)``; never exceeds ``log Z``."""
    q = np.asarray(q, dtype=np.float64)
    f = inst.column(y)
    _check_distribution(q, f.shape[0])
    return q @ f + entropy(q)


def duality_gap(q, inst: PartitionInstance, y: int | None = None) -> np.ndarray | float:
    """``log Z - (E_q[f] + H(q))``, which equals ``KL(q || gibbs(f))``.

    ``q`` may be a single distribution or a stack of them.
    """
    gap = brute_force_log_partition(inst, y) - variational_objective(q, inst, y)
    return float(gap) if np.ndim(gap) == 0 else gap


def random_instance(rng: np.random.Generator, max_size: int = 64, max_classes: int = 8,
                    scale: float = 3.0) -> PartitionInstance:
    n = int(rng.integers(1, max_size + 1))
    k = int(rng.integers(1, max_classes + 1))
    shape = (n,) if k == 1 else (n, k)
    return PartitionInstance(rng.normal(scale=scale, size=shape))


def random_distributions(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """Dirichlet draws with mixed concentrations, some sparse, some near-uniform."""
    conc = 10.0 ** rng.uniform(-1.5, 1.0, size=(count, 1))
    q = rng.gamma(np.broadcast_to(conc, (count, n)))
    sums = q.sum(axis=1, keepdims=True)
    empty = sums[:, 0] == 0
    q[empty] = 1.0
    return q / q.sum(axis=1, keepdims=True)


@dataclass
class DualityReport:
    instances: int
    passed: int
    max_gibbs_gap: float
    max_kl_mismatch: float
    max_excess: float
    failures: list[str] = field(default_factory=list)


def duality_suite(n_instances: int = 100, n_q: int = 1000, seed: int = 0,
                  tol: float = 1e-9) -> DualityReport:
    """Random instances: Gibbs attains ``log Z``; every ``q`` has gap = KL."""
    rng = np.random.default_rng(seed)
    rep = DualityReport(n_instances, 0, 0.0, 0.0, -np.inf)
    for i in range(n_instances):
        inst = random_instance(rng)
        classes = [None] if inst.energies.ndim == 1 else range(inst.energies.shape[1])
        ok = True
        for y in classes:
            p = gibbs(inst, y)
            g0 = abs(duality_gap(p, inst, y))
            qs = random_distributions(rng, inst.size, n_q)
            gaps = duality_gap(qs, inst, y)
            mismatch = float(np.max(np.abs(gaps - kl_divergence(qs, p))))
            excess = float(np.max(variational_objective(qs, inst, y))
                           - brute_force_log_partition(inst, y))
            rep.max_gibbs_gap = max(rep.max_gibbs_gap, g0)
            rep.max_kl_mismatch = max(rep.max_kl_mismatch, mismatch)
            rep.max_excess = max(rep.max_excess, excess)
            if g0 > tol or mismatch > tol or excess > tol:
                ok = False
                rep.failures.append(
                    f"instance {i} class {y}: gibbs gap {g0:.2e}, "
                    f"kl mismatch {mismatch:.2e}, excess {excess:.2e}")
        rep.passed += ok
    return rep


# ---------------------------------------------------------------------------
# contrastive entropy bound


@dataclass(frozen=True)
class DiscreteJoint:
    """Probability table ``p(x, y)`` over a finite ``X x Y``."""

    table: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.table, dtype=np.float64)
        if p.ndim != 2 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("joint must be a nonnegative 2-D table summing to 1")
        object.__setattr__(self, "table", p)

    @property
    def px(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def py(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def entropy_x(self) -> float:
        return float(entropy(self.px))

    def mutual_information(self) -> float:
        outer = np.outer(self.px, self.py)
        return float((xlogy(self.table, self.table) - xlogy(self.table, outer)).sum())

    def sample(self, rng: np.random.Generator, shape) -> tuple[np.ndarray, np.ndarray]:
        flat = rng.choice(self.table.size, size=shape, p=self.table.ravel())
        return np.divmod(flat, self.table.shape[1])


@dataclass(frozen=True)
class Critic:
    """Embeddings ``l(x)`` (rows per x value), ``e(y)`` (rows per y value), temperature."""

    l: np.ndarray
    e: np.ndarray
    temperature: float = 1.0


def contrastive_bound_batch(l_x: np.ndarray, e_y: np.ndarray, temperature: float,
                            form: str = "paired") -> np.ndarray:
    """InfoNCE value of each batch, ``(B, M, d)`` embeddings in, ``(B,)`` out.

    ``paired`` uses ``l(x_i).e(y_i)/t`` on the diagonal and
    ``l(x_i).l(x_j)/t`` off it, the critic that turns InfoNCE into the
    contrastive loss.  ``standard`` uses ``l(x_i).e(y_j)/t`` everywhere.
    """
    m = l_x.shape[1]
    if form == "paired":
        scores = np.einsum("bid,bjd->bij", l_x, l_x) / temperature
        diag = np.einsum("bid,bid->bi", l_x, e_y) / temperature
        idx = np.arange(m)
        scores[:, idx, idx] = diag
    elif form == "standard":
        scores = np.einsum("bid,bjd->bij", l_x, e_y) / temperature
        diag = np.einsum("bii->bi", scores)
    else:
        raise ValueError(f"unknown critic form {form!r}")
    top = scores.max(axis=2, keepdims=True)
    log_mean = np.log(np.exp(scores - top).mean(axis=2)) + top[..., 0]
    return (diag - log_mean).mean(axis=1)


@dataclass
class EntropyBoundReport:
    M: int
    form: str
    H_X: float
    I_XY: float
    estimates: np.ndarray
    std_errors: np.ndarray
    violations: np.ndarray  # per trial: estimate > H_X + 3 SE
    degenerate: bool

    @property
    def mean_estimate(self) -> float:
        return float(self.estimates.mean())

    @property
    def violation_rate(self) -> float:
        return float(self.violations.mean())

    def as_record(self) -> dict:
        return {
            "M": self.M, "form": self.form, "H_X": self.H_X, "I_XY": self.I_XY,
            "mean_estimate": self.mean_estimate,
            "max_estimate": float(self.estimates.max()),
            "trials": int(len(self.estimates)),
            "violations": int(self.violations.sum()),
            "degenerate": self.degenerate,
        }


def entropy_bound_check(joint: DiscreteJoint, M: int, trials: int, critic: Critic, *,
                        batches: int = 200, seed: int = 0,
                        form: str = "paired") -> EntropyBoundReport:
    """Monte Carlo estimate of the contrastive bound against the exact ``H(X)``.

    Each trial averages ``batches`` independent batches of ``M`` joint
    samples; a trial counts as a violation when its mean exceeds ``H(X)`` by
    more than three standard errors.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    if critic.l.shape[0] != joint.table.shape[0] or critic.e.shape[0] != joint.table.shape[1]:
        raise ValueError("critic embeddings do not match the joint's support")
    rng = np.random.default_rng(seed)
    h_x = joint.entropy_x()
    est = np.empty(trials)
    se = np.empty(trials)
    for t in range(trials):
        xs, ys = joint.sample(rng, (batches, M))
        vals = contrastive_bound_batch(critic.l[xs], critic.e[ys], critic.temperature, form)
        est[t] = vals.mean()
        se[t] = vals.std(ddof=1) / math.sqrt(batches)
    return EntropyBoundReport(
        M=M, form=form, H_X=h_x, I_XY=joint.mutual_information(),
        estimates=est, std_errors=se, violations=est > h_x + 3 * se,
        degenerate=int(np.count_nonzero(joint.px)) <= 1,
    )


def random_joint(rng: np.random.Generator, nx: int, ny: int, sharpness: float = 1.0) -> DiscreteJoint:
    t = rng.gamma(sharpness, size=(nx, ny))
    return DiscreteJoint(t / t.sum())


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
