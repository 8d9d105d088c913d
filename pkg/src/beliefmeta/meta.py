"""Optimisation-based meta-learning with belief-driven task selection.

Three training regimes share one loop:

* ``NTS`` - no selection: sample ``I`` tasks, label their query sets, train.
* ``ST``  - sample ``J`` standard tasks, adapt to all, label the ``I`` with the
  highest task uncertainty.
* ``ML``  - sample ``I`` multi-query tasks carrying ``J`` query sets in total,
  adapt once per support set, label the most uncertain query set of each task.

Cost counters follow the model ``I*M*(F+B) + J*F``: every inner step is one
forward and one backward pass, every candidate query set scored is one forward
pass, and each trained task adds one outer backward pass.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .belief import (
    ScheduleConfig,
    TaskBelief,
    beliefs_and_vacuity,
    eta_schedule,
    evidential_loss,
    incorrect_belief,
    lambda_schedule,
    task_beliefs_from_evidence,
    task_uncertainty,
)
from .episodes import (
    Dataset,
    LabelBudget,
    LabeledSet,
    QuerySet,
    SamplerConfig,
    Task,
    reveal_labels,
    sample_task,
    transform_queries,
)
from .errors import BeliefMetaError, ConfigError, LabelError, NonFiniteError
from .model import Architecture, ParamSet, evidence, init_params

log = logging.getLogger(__name__)

MODES = ("NTS", "ST", "ML")
RATE_PREFIX = "inner_lr."

METRIC_COLUMNS = (
    "iter", "epoch", "mode", "lambda", "eta", "mean_vb", "mean_cb", "mean_ib",
    "mean_unc_selected", "train_loss", "labeled_query_sets", "fwd_count", "bwd_count",
)


def derive_seed(seed: int, stream: str) -> int:
    """Per-component seed: first 8 bytes of sha256(f"{seed}:{stream}"), big endian."""
    digest = hashlib.sha256(f"{int(seed)}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class MetaConfig:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 2
    inner_steps: int = 5
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    tasks_per_iter: int = 2
    candidate_pool: int = 16
    warmup: int = 0
    epochs: int = 1
    iters_per_epoch: int = 100
    mode: str = "NTS"
    second_order: bool = True
    learned_inner_rates: bool = False
    optimizer: str = "adam"
    label_budget: Optional[int] = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0

    def validate(self, prefix: str = "meta") -> None:
        def bad(name, msg):
            raise ConfigError(f"{prefix}.{name}", msg)

        for name in ("n_way", "k_shot", "q_query", "inner_steps", "tasks_per_iter",
                     "candidate_pool", "epochs", "iters_per_epoch"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad(name, "must be a positive integer")
        if self.n_way < 2:
            bad("n_way", "must be at least 2")
        if self.inner_lr <= 0:
            bad("inner_lr", "must be positive")
        if self.outer_lr <= 0:
            bad("outer_lr", "must be positive")
        if not isinstance(self.warmup, int) or self.warmup < 0:
            bad("warmup", "must be a nonnegative integer")
        if self.mode not in MODES:
            bad("mode", f"must be one of {', '.join(MODES)}")
        if self.optimizer not in ("adam", "sgd"):
            bad("optimizer", "must be 'adam' or 'sgd'")
        if self.label_budget is not None and (not isinstance(self.label_budget, int) or self.label_budget < 1):
            bad("label_budget", "must be a positive integer or null")
        if self.mode in ("ST", "ML") and self.candidate_pool < self.tasks_per_iter:
            bad("candidate_pool", "must be at least tasks_per_iter")
        if self.mode == "ML" and self.candidate_pool % self.tasks_per_iter:
            bad("candidate_pool", "must be a multiple of tasks_per_iter in ML mode")

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iters_per_epoch

    def sampler(self, queries_per_task: int = 1) -> SamplerConfig:
        return SamplerConfig(self.n_way, self.k_shot, self.q_query, queries_per_task, self.seed)


@dataclass
class CostCounters:
    inner_forward: int = 0
    inner_backward: int = 0
    selection_forward: int = 0
    outer_forward: int = 0
    outer_backward: int = 0
    labeled_query_sets: int = 0
    labeled_support_sets: int = 0

    @property
    def forward(self) -> int:
        return self.inner_forward + self.selection_forward + self.outer_forward

    @property
    def backward(self) -> int:
        return self.inner_backward + self.outer_backward

    def snapshot(self) -> dict:
        return asdict(self)

    def delta(self, before: Mapping[str, int]) -> dict:
        return {k: v - before[k] for k, v in asdict(self).items()}


class Adam:
    """Adam over named arrays; moments are created lazily per parameter."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> ParamSet:
        self.t += 1
        out = {}
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, np.zeros_like(p)) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(p)) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return ParamSet(out)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> ParamSet:
        return ParamSet({k: p - self.lr * grads[k] for k, p in params.items()})


def make_optimizer(cfg: MetaConfig):
    return Adam(cfg.outer_lr) if cfg.optimizer == "adam" else SGD(cfg.outer_lr)


def with_inner_rates(params: ParamSet, arch: Architecture, steps: int, alpha: float) -> ParamSet:
    """Add one trainable inner rate per layer and step, initialised to ``alpha``."""
    entries = dict(params)
    for i in range(len(arch.layer_dims)):
        for m in range(steps):
            entries.setdefault(f"{RATE_PREFIX}layer{i}.step{m}", np.array(alpha))
    return ParamSet(entries)


def _split(theta: Mapping) -> tuple[dict, dict]:
    model = {k: v for k, v in theta.items() if not k.startswith(RATE_PREFIX)}
    rates = {k: v for k, v in theta.items() if k.startswith(RATE_PREFIX)}
    return model, rates


def _rate_for(name: str, step: int, alpha: float, rates: Mapping):
    key = f"{RATE_PREFIX}{name.split('.')[0]}.step{step}"
    return rates.get(key, alpha)


def adapt(
    theta: Mapping[str, ad.Node],
    loss_fn: Callable[[Mapping[str, ad.Node]], ad.Node],
    steps: int,
    alpha: float,
    track: bool = True,
    second_order: bool = True,
    counters: CostCounters | None = None,
) -> dict[str, ad.Node]:
    """Run ``steps`` of gradient descent from a copy of ``theta``.

    ``track`` keeps the result differentiable with respect to ``theta``;
    ``second_order`` additionally keeps the path through the inner gradients
    (Hessian-vector products). Entries named ``inner_lr.<layer>.step<m>``
    act as per-layer, per-step rates (absolute value taken at use).
    """
    if steps < 1:
        raise ValueError("inner loop needs at least one step")
    model, rates = _split(theta)
    params = dict(model)
    for m in range(steps):
        if track:
            current = params
        else:
            current = {k: ad.leaf(v.value) for k, v in params.items()}
        try:
            loss = loss_fn(current)
        except NonFiniteError as exc:
            raise NonFiniteError(f"inner step {m + 1}: {exc}") from None
        if counters is not None:
            counters.inner_forward += 1
        if not np.isfinite(loss.value):
            raise NonFiniteError(f"inner step {m + 1}: non-finite loss")
        names = [k for k, v in current.items() if v.requires_grad]
        grads = ad.grad(loss, [current[k] for k in names], create_graph=track and second_order,
                        allow_unused=True)
        if counters is not None:
            counters.inner_backward += 1
        nxt = {}
        for k, v in current.items():
            rate = _rate_for(k, m, alpha, rates)
            if k not in names:
                nxt[k] = v
                continue
            g = grads[v]
            if track:
                step = ad.mul(ad.abs_(rate), g) if isinstance(rate, ad.Node) else ad.scalar_mul(g, rate)
                nxt[k] = ad.sub(v, step)
            else:
                r = abs(float(rate.value)) if isinstance(rate, ad.Node) else rate
                nxt[k] = ad.Node(v.value - r * g.value)
        params = nxt
    return params


def support_loss_fn(support: LabeledSet, eta: float):
    def loss(p):
        return evidential_loss(evidence(p, support.x), support.y, eta)
    return loss


def inner_adapt(
    theta: Mapping[str, ad.Node],
    support: LabeledSet,
    steps: int,
    alpha: float,
    eta: float,
    track_higher_order: bool = True,
    second_order: bool = True,
    counters: CostCounters | None = None,
) -> dict[str, ad.Node]:
    """Adapt to a support set by minimising its mean evidential loss."""
    if len(support.x) == 0:
        raise ValueError("empty support set")
    if alpha <= 0:
        raise ValueError("inner rate must be positive")
    return adapt(theta, support_loss_fn(support, eta), steps, alpha,
                 track=track_higher_order, second_order=second_order, counters=counters)


def apply_meta_update(
    params: ParamSet,
    leaves: Mapping[str, ad.Node],
    task_losses: Sequence[ad.Node],
    opt,
    counters: CostCounters | None = None,
) -> tuple[ParamSet, dict[str, np.ndarray]]:
    """Sum per-task query losses, differentiate w.r.t. ``leaves``, step ``opt``."""
    total = task_losses[0]
    for loss in task_losses[1:]:
        total = ad.add(total, loss)
    grads = ad.grad(total, list(leaves.values()), allow_unused=True)
    if counters is not None:
        counters.outer_backward += len(task_losses)
    arrays = {k: grads[n].value for k, n in leaves.items()}
    for k, g in arrays.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite meta-gradient for {k}")
    return opt.step(params, arrays), arrays


def outer_step(
    params: ParamSet,
    leaves: Mapping[str, ad.Node],
    batch: Sequence[tuple[Mapping[str, ad.Node], QuerySet]],
    eta: float,
    opt,
    counters: CostCounters | None = None,
) -> ParamSet:
    """One meta-update from ``(adapted params, revealed query set)`` pairs.

    The adapted params must have been produced from ``leaves`` with tracking
    on, so the gradient reaches ``params`` through the inner loop.
    """
    losses = []
    for adapted, qs in batch:
        if not qs.labels_revealed:
            raise LabelError("outer step needs revealed query-set labels")
        losses.append(evidential_loss(evidence(adapted, qs.x), qs.y, eta))
        if counters is not None:
            counters.outer_forward += 1
    new, _ = apply_meta_update(params, leaves, losses, opt, counters)
    return new


def score_task(
    theta: ParamSet,
    task: Task,
    lam: float,
    steps: int,
    alpha: float,
    eta: float,
    counters: CostCounters | None = None,
) -> list[TaskBelief]:
    """Adapt on the support set (no tracking) and score every query set."""
    if not task.query_sets:
        raise ValueError("task has no query sets")
    adapted = inner_adapt(theta.as_leaves(False), task.support, steps, alpha, eta,
                          track_higher_order=False, counters=counters)
    scores = []
    for qs in task.query_sets:
        with ad.no_grad():
            ev = evidence(adapted, qs.x).value
        if counters is not None:
            counters.selection_forward += 1
        tb = task_beliefs_from_evidence(ev)
        task_uncertainty(tb, lam)
        scores.append(tb)
    return scores


def select(scores: Sequence[TaskBelief | float], how_many: int) -> list[int]:
    """Indices of the ``how_many`` highest uncertainty scores; ties go to the lower index."""
    unc = [s.unc if isinstance(s, TaskBelief) else float(s) for s in scores]
    if how_many > len(unc):
        raise ValueError(f"cannot select {how_many} of {len(unc)}")
    return sorted(range(len(unc)), key=lambda i: (-unc[i], i))[:how_many]


class TrainingError(BeliefMetaError, RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"training aborted at iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass
class TrainResult:
    params: ParamSet
    counters: CostCounters
    rows: list[dict]
    iterations: int


@dataclass
class _Candidate:
    task: Task
    index: int
    ev: ad.Node
    belief: TaskBelief


def _format(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return f"{v:.6g}"


def format_metric_row(row: Mapping) -> list[str]:
    return [_format(row[c]) for c in METRIC_COLUMNS]


def train(
    ds: Dataset,
    arch: Architecture,
    cfg: MetaConfig,
    sinks: Iterable[Callable[[dict], None]] = (),
    init: ParamSet | None = None,
) -> TrainResult:
    cfg.validate()
    sinks = list(sinks)
    rng = np.random.default_rng(derive_seed(cfg.seed, "sampler"))
    params = init if init is not None else init_params(arch, derive_seed(cfg.seed, "init"))
    if cfg.learned_inner_rates:
        params = with_inner_rates(params, arch, cfg.inner_steps, cfg.inner_lr)
    opt = make_optimizer(cfg)
    counters = CostCounters()
    budget = LabelBudget(cfg.label_budget)
    I = cfg.tasks_per_iter
    rows: list[dict] = []

    for it in range(cfg.total_iterations):
        if budget.remaining is not None and budget.remaining < I:
            log.info("label budget exhausted after %d iterations", it)
            break
        epoch = it // cfg.iters_per_epoch
        lam = lambda_schedule(epoch, cfg.schedule)
        eta = eta_schedule(epoch, cfg.schedule)
        try:
            params, row = _iteration(ds, cfg, params, opt, counters, budget, rng, it, lam, eta)
        except (NonFiniteError, FloatingPointError) as exc:
            raise TrainingError(it, exc) from exc
        row.update(iter=it, epoch=epoch, mode=cfg.mode, **{"lambda": lam, "eta": eta})
        rows.append(row)
        for sink in sinks:
            sink(row)
    return TrainResult(params, counters, rows, len(rows))


def _iteration(ds, cfg, params, opt, counters, budget, rng, it, lam, eta):
    I, J, M = cfg.tasks_per_iter, cfg.candidate_pool, cfg.inner_steps
    leaves = params.as_leaves()
    warm = it < cfg.warmup

    def adapt_task(task):
        return inner_adapt(leaves, task.support, M, cfg.inner_lr, eta, track_higher_order=True,
                           second_order=cfg.second_order, counters=counters)

    def candidate(task, index, adapted):
        ev = evidence(adapted, task.query_sets[index].x)
        tb = task_beliefs_from_evidence(ev.value)
        task_uncertainty(tb, lam)
        return _Candidate(task, index, ev, tb)

    chosen: list[_Candidate] = []
    if cfg.mode == "NTS" or warm:
        for _ in range(I):
            task = sample_task(ds, cfg.sampler(1), rng)
            chosen.append(candidate(task, 0, adapt_task(task)))
            counters.outer_forward += 1
        counters.labeled_support_sets += I
    elif cfg.mode == "ST":
        pool = []
        for _ in range(J):
            task = sample_task(ds, cfg.sampler(1), rng)
            pool.append(candidate(task, 0, adapt_task(task)))
            counters.selection_forward += 1
        chosen = [pool[i] for i in select([c.belief for c in pool], I)]
        counters.labeled_support_sets += J
    else:
        per_task = J // I
        for _ in range(I):
            task = sample_task(ds, cfg.sampler(per_task), rng)
            adapted = adapt_task(task)
            cands = []
            for s in range(per_task):
                cands.append(candidate(task, s, adapted))
                counters.selection_forward += 1
            chosen.append(cands[select([c.belief for c in cands], 1)[0]])
        counters.labeled_support_sets += I

    losses, ibs = [], []
    for c in chosen:
        task = reveal_labels(c.task, c.index, budget)
        y = task.query_sets[c.index].y
        losses.append(evidential_loss(c.ev, y, eta))
        b, _ = beliefs_and_vacuity(c.ev.value)
        c.belief.ib = float(np.mean(incorrect_belief(b, y)))
        ibs.append(c.belief.ib)
    counters.labeled_query_sets += len(chosen)
    new_params, _ = apply_meta_update(params, leaves, losses, opt, counters)
    row = {
        "mean_vb": float(np.mean([c.belief.vb for c in chosen])),
        "mean_cb": float(np.mean([c.belief.cb for c in chosen])),
        "mean_ib": float(np.mean(ibs)),
        "mean_unc_selected": float(np.mean([c.belief.unc for c in chosen])),
        "train_loss": float(np.mean([l.value for l in losses])),
        "labeled_query_sets": counters.labeled_query_sets,
        "fwd_count": counters.forward,
        "bwd_count": counters.backward,
        "counters": counters.snapshot(),
    }
    return new_params, row


@dataclass
class ThresholdRow:
    threshold: float
    coverage: float
    accuracy: Optional[float]


@dataclass
class OODRow:
    kind: str
    magnitude: float
    mean_vacuity: float
    accuracy: float


@dataclass
class EvalReport:
    accuracy: float
    accuracy_stderr: float
    thresholds: list[ThresholdRow]
    mean_vacuity: float
    mean_vb: float
    mean_cb: float
    mean_ib: float
    num_tasks: int
    num_queries: int
    ood: list[OODRow] = field(default_factory=list)


def threshold_table(vacuity: np.ndarray, correct: np.ndarray, thresholds: Sequence[float]) -> list[ThresholdRow]:
    """Coverage and accuracy among predictions whose vacuity is below each threshold."""
    rows = []
    for t in thresholds:
        keep = vacuity < t
        cov = float(keep.mean()) if len(keep) else 0.0
        acc = float(correct[keep].mean()) if keep.any() else None
        rows.append(ThresholdRow(float(t), cov, acc))
    return rows


def summarize(
    evidences: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    thresholds: Sequence[float],
) -> EvalReport:
    """Build an :class:`EvalReport` from per-task query evidence and integer labels."""
    accs, vacs, corr, tbs = [], [], [], []
    for ev, lab in zip(evidences, labels):
        ev = np.asarray(ev, dtype=np.float64)
        lab = np.asarray(lab)
        pred = np.argmax(ev + 1.0, axis=1)
        ok = pred == lab
        b, u = beliefs_and_vacuity(ev)
        accs.append(ok.mean())
        vacs.append(u)
        corr.append(ok)
        y = np.eye(ev.shape[1])[lab]
        tbs.append(task_beliefs_from_evidence(ev, y))
    vac = np.concatenate(vacs)
    ok = np.concatenate(corr)
    n = len(accs)
    stderr = float(np.std(accs, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return EvalReport(
        accuracy=float(np.mean(accs)),
        accuracy_stderr=stderr,
        thresholds=threshold_table(vac, ok, thresholds),
        mean_vacuity=float(vac.mean()),
        mean_vb=float(np.mean([t.vb for t in tbs])),
        mean_cb=float(np.mean([t.cb for t in tbs])),
        mean_ib=float(np.mean([t.ib for t in tbs])),
        num_tasks=n,
        num_queries=len(vac),
    )


def evaluate(
    theta: ParamSet,
    ds: Dataset,
    cfg: MetaConfig,
    num_tasks: int,
    thresholds: Sequence[float] = (0.1, 0.2, 0.5, 1.0),
    ood: Optional[Mapping] = None,
    seed: int = 0,
    eta: Optional[float] = None,
) -> EvalReport:
    """Adapt to held-out tasks and report accuracy, vacuity-threshold and OOD results.

    ``ood`` is ``{"kind": ..., "magnitudes": [...], "seed": int}``; each
    magnitude transforms the query features of the same tasks.
    """
    if num_tasks < 1:
        raise ValueError("num_tasks must be at least 1")
    if eta is None:
        eta = eta_schedule(cfg.epochs - 1, cfg.schedule)
    rng = np.random.default_rng(derive_seed(seed, "eval-tasks"))
    sampler = cfg.sampler(1)
    leaves = theta.as_leaves(False)
    evs, labs = [], []
    shifted: dict[float, tuple[list, list]] = {}
    mags = list(ood.get("magnitudes", [])) if ood else []
    for _ in range(num_tasks):
        task = sample_task(ds, sampler, rng)
        adapted = inner_adapt(leaves, task.support, cfg.inner_steps, cfg.inner_lr, eta,
                              track_higher_order=False)
        qs = reveal_labels(task, 0).query_sets[0]
        lab = np.argmax(qs.y, axis=1)
        with ad.no_grad():
            evs.append(evidence(adapted, qs.x).value)
            labs.append(lab)
            for mag in mags:
                t2 = transform_queries(task, ood["kind"], mag, ood.get("seed", 0))
                e2 = evidence(adapted, t2.query_sets[0].x).value
                shifted.setdefault(mag, ([], []))
                shifted[mag][0].append(e2)
                shifted[mag][1].append(lab)
    report = summarize(evs, labs, thresholds)
    for mag in mags:
        sub_report = summarize(*shifted[mag], thresholds=())
        report.ood.append(OODRow(ood["kind"], float(mag), sub_report.mean_vacuity, sub_report.accuracy))
    return report
