"""Subjective-logic opinions and task-level belief measures.

Evidence ``e`` (one nonnegative value per class) gives Dirichlet
concentrations ``alpha = e + 1`` with strength ``S = sum(alpha)``; belief
masses are ``e / S`` and vacuity is ``N / S``. From the beliefs we derive
dissonance (conflicting belief) and, once the label is known, incorrect belief.
Averaged over a query set these become the task's vacuous, conflicting and
incorrect belief.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import EvidenceError

BOUND_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Opinion:
    beliefs: np.ndarray
    vacuity: float
    alphas: np.ndarray
    strength: float

    @property
    def num_classes(self) -> int:
        return len(self.beliefs)

    @property
    def probabilities(self) -> np.ndarray:
        return self.alphas / self.strength


@dataclass
class TaskBelief:
    vb: float
    cb: float
    ib: Optional[float] = None
    unc: Optional[float] = None
    lam: Optional[float] = None


@dataclass(frozen=True)
class ScheduleConfig:
    lambda_start: float = 0.99
    lambda_end: float = 0.5
    lambda_horizon: float = 50.0
    eta_cap: float = 0.0
    eta_ramp_divisor: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_end <= self.lambda_start <= 1.0:
            raise ValueError("need 0 <= lambda_end <= lambda_start <= 1")
        if self.eta_cap < 0:
            raise ValueError("eta_cap must be nonnegative")
        if self.lambda_horizon <= 0 or self.eta_ramp_divisor <= 0:
            raise ValueError("schedule horizons must be positive")


def _check_evidence(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.size == 0 or e.shape[-1] == 0:
        raise EvidenceError("empty evidence vector")
    if not np.all(np.isfinite(e)):
        raise EvidenceError("evidence must be finite")
    if np.any(e < 0):
        raise EvidenceError("evidence must be nonnegative")
    return e


def opinion_from_evidence(e: Sequence[float]) -> Opinion:
    e = _check_evidence(e)
    if e.ndim != 1 or e.size < 2:
        raise EvidenceError("need a single evidence vector with at least two classes")
    alphas = e + 1.0
    strength = float(alphas.sum())
    return Opinion(beliefs=e / strength, vacuity=e.size / strength, alphas=alphas, strength=strength)


def beliefs_and_vacuity(evidence: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched form of :func:`opinion_from_evidence` for an (n, N) array."""
    e = _check_evidence(evidence)
    s = (e + 1.0).sum(axis=-1, keepdims=True)
    return e / s, e.shape[-1] / s[..., 0]


def dissonance(b) -> float | np.ndarray:
    """Dissonance of one belief vector, or of each row of a 2-D array.

    ``Bal(x, y) = 1 - |x - y| / (x + y)`` for two positive masses and 0
    otherwise. A class whose competitors all carry zero mass contributes 0.
    """
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    b = np.atleast_2d(b)
    bj, bn = b[:, :, None], b[:, None, :]
    pos = (bj > 0) & (bn > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        bal = np.where(pos, 1.0 - np.abs(bj - bn) / np.where(pos, bj + bn, 1.0), 0.0)
    n = b.shape[1]
    off = ~np.eye(n, dtype=bool)
    # num[n] = sum_{j != n} b_j Bal(b_j, b_n)
    num = np.einsum("kjn,kj->kn", bal * off, b)
    den = b.sum(axis=1, keepdims=True) - b
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    dis = (b * ratio).sum(axis=1)
    return float(dis[0]) if single else dis


def _check_one_hot(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != n:
        raise EvidenceError(f"label has {y.shape[-1]} entries, expected {n}")
    rows = y.reshape(-1, n)
    if not (np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=1) == 1)):
        raise EvidenceError("label is not a valid one-hot vector")
    return y


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def incorrect_belief(b, y) -> float | np.ndarray:
    """Belief mass placed off the true class: ``sum(b * (1 - y))``."""
    b = np.asarray(b, dtype=np.float64)
    y = _check_one_hot(y, b.shape[-1])
    if y.shape != b.shape:
        raise EvidenceError("belief and label shapes differ")
    ib = (b * (1.0 - y)).sum(axis=-1)
    return float(ib) if b.ndim == 1 else ib


def task_beliefs(opinions: Sequence[Opinion], labels=None) -> TaskBelief:
    if len(opinions) == 0:
        raise EvidenceError("empty query set")
    beliefs = np.stack([o.beliefs for o in opinions])
    vac = np.array([o.vacuity for o in opinions])
    ib = None
    if labels is not None:
        labels = np.asarray(labels, dtype=np.float64)
        if len(labels) != len(opinions):
            raise EvidenceError("labels do not align with opinions")
        ib = float(np.mean(incorrect_belief(beliefs, labels)))
    return TaskBelief(vb=float(vac.mean()), cb=float(np.mean(dissonance(beliefs))), ib=ib)


def task_beliefs_from_evidence(evidence: np.ndarray, labels=None) -> TaskBelief:
    """Vectorised :func:`task_beliefs` taking raw (n, N) evidence."""
    b, u = beliefs_and_vacuity(evidence)
    if b.shape[0] == 0:
        raise EvidenceError("empty query set")
    ib = None if labels is None else float(np.mean(incorrect_belief(b, labels)))
    return TaskBelief(vb=float(u.mean()), cb=float(np.mean(dissonance(b))), ib=ib)


def task_uncertainty(tb: TaskBelief, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    tb.unc = lam * tb.vb + (1.0 - lam) * tb.cb
    tb.lam = lam
    return tb.unc


def lambda_schedule(epoch: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    if epoch <= 0:
        return cfg.lambda_start
    frac = min(1.0, epoch / cfg.lambda_horizon)
    if frac == 1.0:
        return cfg.lambda_end
    return cfg.lambda_start - (cfg.lambda_start - cfg.lambda_end) * frac


def eta_schedule(epoch: int, cfg: ScheduleConfig) -> float:
    return min(cfg.eta_cap, cfg.eta_cap * epoch / cfg.eta_ramp_divisor)


def evidential_loss(e, y, eta: float = 0.0) -> ad.Node:
    """Negative log marginal likelihood under the Dirichlet plus ``eta`` times
    the incorrect belief.

    ``e`` is a single evidence vector or an (n, N) batch (array or graph node);
    a batch returns the mean per-sample loss. The result is a scalar node.
    """
    e = ad._lift(e)
    if e.ndim == 1:
        e = ad.reshape(e, (1, e.shape[0]))
    if np.any(e.value < 0):
        raise EvidenceError("evidence must be nonnegative")
    n = e.shape[1]
    y = _check_one_hot(y, n).reshape(-1, n)
    if y.shape[0] != e.shape[0]:
        raise EvidenceError("labels do not align with evidence rows")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    yc = ad.Node(y)
    alpha = ad.add(e, 1.0)
    strength = ad.sum_(alpha, axis=1, keepdims=True)
    log_p = ad.sub(ad.log(alpha), ad.log(strength))
    nll = ad.neg(ad.sum_(ad.mul(yc, log_p), axis=1))
    per_sample = nll
    if eta:
        off = ad.sum_(ad.mul(e, ad.Node(1.0 - y)), axis=1, keepdims=True)
        ib = ad.reshape(ad.div(off, strength), (e.shape[0],))
        per_sample = ad.add(nll, ad.scalar_mul(ib, eta))
    return ad.mean(per_sample)


def verify_bound(b, exhaustive_labels: bool = True) -> tuple[float, bool]:
    """Slack of the bound ``ib >= cb / 2`` for one belief vector.

    Exhaustive mode evaluates ``ib`` for every possible true label; otherwise
    it uses the worst case ``sum(b) - max(b)``. Returns ``(min slack, holds)``.
    """
    b = np.asarray(b, dtype=np.float64)
    cb = dissonance(b)
    if exhaustive_labels:
        ibs = [incorrect_belief(b, one_hot(k, b.size)) for k in range(b.size)]
        worst = min(ibs)
    else:
        worst = float(b.sum() - b.max())
    slack = worst - cb / 2.0
    return slack, slack >= -BOUND_TOLERANCE


def bound_slacks(b: np.ndarray, cb_scale: float = 1.0) -> np.ndarray:
    """Per-row minimum over labels of ``ib - cb / 2`` for an (n, N) batch.

    ``cb_scale`` exists as a negative-control hook; 1.0 is the true measure.
    """
    b = np.asarray(b, dtype=np.float64)
    cb = dissonance(b) * cb_scale
    total = b.sum(axis=1)
    # ib for label k is total - b_k, so the minimum over labels uses max(b)
    ib_all = total[:, None] - b
    return ib_all.min(axis=1) - cb / 2.0


def sample_belief_vectors(rng: np.random.Generator, count: int, num_classes: int) -> np.ndarray:
    """Dirichlet(1, ..., 1) draws scaled by a total mass uniform in (0, 1]."""
    p = rng.dirichlet(np.ones(num_classes), size=count)
    mass = 1.0 - rng.random(count)
    return p * mass[:, None]
