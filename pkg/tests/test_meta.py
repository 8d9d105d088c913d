import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beliefmeta import autodiff as ad
from beliefmeta.belief import ScheduleConfig, TaskBelief, one_hot, task_uncertainty
from beliefmeta.episodes import LabeledSet, QuerySet, SamplerConfig, make_synthetic, reveal_labels, sample_task
from beliefmeta.errors import LabelError, NonFiniteError
from beliefmeta.meta import (
    SGD,
    Adam,
    CostCounters,
    MetaConfig,
    TrainingError,
    adapt,
    apply_meta_update,
    derive_seed,
    evaluate,
    format_metric_row,
    inner_adapt,
    outer_step,
    score_task,
    select,
    summarize,
    threshold_table,
    train,
)
from beliefmeta.model import Architecture, ParamSet, init_params, zero_params

DS = make_synthetic(10, 4, 40, 3.0, 1.0, seed=0)
ARCH = Architecture(4, 5, (8,))


# plain numpy reference: MLP forward/backward and the evidential loss gradient

def np_forward(p, x):
    layers = sum(1 for k in p if k.endswith(".weight"))
    zs, hs = [], [x]
    for i in range(layers):
        z = hs[-1] @ p[f"layer{i}.weight"] + p[f"layer{i}.bias"]
        zs.append(z)
        hs.append(np.maximum(z, 0) if i < layers - 1 else z)
    return zs, hs


def np_loss_and_grad(p, x, y, eta):
    zs, hs = np_forward(p, x)
    z = zs[-1]
    e = np.log1p(np.exp(z))
    alpha = e + 1
    s = alpha.sum(axis=1, keepdims=True)
    off = (e * (1 - y)).sum(axis=1, keepdims=True)
    n = len(x)
    loss = np.mean(-np.log((alpha * y).sum(axis=1)) + np.log(s[:, 0]) + eta * off[:, 0] / s[:, 0])
    de = -y / alpha + 1 / s + eta * ((1 - y) / s - off / s ** 2)
    dz = de / (1 + np.exp(-z)) / n
    grads = {}
    layers = len(zs)
    for i in reversed(range(layers)):
        grads[f"layer{i}.weight"] = hs[i].T @ dz
        grads[f"layer{i}.bias"] = dz.sum(axis=0)
        if i:
            dz = (dz @ p[f"layer{i}.weight"].T) * (zs[i - 1] > 0)
    return loss, grads


def np_meta_loss(p, sx, sy, qx, qy, steps, alpha, eta):
    cur = {k: v.copy() for k, v in p.items()}
    for _ in range(steps):
        _, g = np_loss_and_grad(cur, sx, sy, eta)
        cur = {k: cur[k] - alpha * g[k] for k in cur}
    return np_loss_and_grad(cur, qx, qy, eta)[0]


def toy_task(seed=3):
    rng = np.random.default_rng(seed)
    arch = Architecture(4, 3, (6,))
    p = {k: v + (rng.uniform(0.2, 0.6, v.shape) if k.endswith("bias") else 0) for k, v in init_params(arch, seed).items()}
    sx, qx = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
    return ParamSet(p), sx, one_hot([0, 1, 2], 3), qx, one_hot([0, 1, 2, 0, 1, 2], 3)


def engine_meta_grad(p, sx, sy, qx, qy, steps, alpha, eta, second_order=True):
    leaves = p.as_leaves()
    support = LabeledSet(sx, sy, np.arange(3))
    adapted = inner_adapt(leaves, support, steps, alpha, eta, second_order=second_order)
    qs = QuerySet(qx, np.arange(len(qx)), qy, labels_revealed=True)
    _, grads = apply_meta_update(p, leaves, [_query_loss(adapted, qs, eta)], SGD(0.0))
    return grads


def _query_loss(adapted, qs, eta):
    from beliefmeta.belief import evidential_loss
    from beliefmeta.model import evidence
    return evidential_loss(evidence(adapted, qs.x), qs.y, eta)


class TestNumpyOracle:
    def test_loss_gradient_matches_engine(self):
        from beliefmeta.belief import evidential_loss
        from beliefmeta.model import evidence

        p, sx, sy, _, _ = toy_task()
        leaves = p.as_leaves()
        loss = evidential_loss(evidence(leaves, sx), sy, 2.0)
        ref_loss, ref = np_loss_and_grad(dict(p), sx, sy, 2.0)
        assert loss.value == pytest.approx(ref_loss, abs=1e-12)
        g = ad.grad(loss, list(leaves.values()))
        for k, n in leaves.items():
            np.testing.assert_allclose(g[n].value, ref[k], rtol=1e-10, atol=1e-12)


class TestInnerAdapt:
    def test_zero_rate_is_identity(self):
        x = ad.leaf(1.7)
        out = adapt({"w": x}, lambda p: p["w"] * p["w"], 1, 0.0)
        assert out["w"].value == 1.7

    def test_quadratic_one_and_two_steps(self):
        x = ad.leaf(1.0)
        one = adapt({"w": x}, lambda p: p["w"] * p["w"], 1, 0.1)
        two = adapt({"w": x}, lambda p: p["w"] * p["w"], 2, 0.1)
        assert one["w"].value == pytest.approx(0.8, abs=1e-15)
        assert two["w"].value == pytest.approx(0.64, abs=1e-15)

    def test_counters(self):
        c = CostCounters()
        task = sample_task(DS, SamplerConfig(5, 1, 2), np.random.default_rng(0))
        inner_adapt(init_params(ARCH, 0).as_leaves(), task.support, 5, 0.01, 0.0, counters=c)
        assert (c.inner_forward, c.inner_backward) == (5, 5)

    def test_does_not_mutate_global(self):
        p = init_params(ARCH, 0)
        before = {k: v.copy() for k, v in p.items()}
        task = sample_task(DS, SamplerConfig(5, 1, 2), np.random.default_rng(0))
        adapted = inner_adapt(p.as_leaves(), task.support, 3, 0.5, 0.0)
        for k in p:
            np.testing.assert_array_equal(p[k], before[k])
        assert any(not np.array_equal(adapted[k].value, p[k]) for k in p)

    def test_matches_numpy_inner_loop(self):
        p, sx, sy, _, _ = toy_task()
        out = inner_adapt(p.as_leaves(), LabeledSet(sx, sy, np.arange(3)), 5, 0.3, 1.0)
        cur = dict(p)
        for _ in range(5):
            _, g = np_loss_and_grad(cur, sx, sy, 1.0)
            cur = {k: cur[k] - 0.3 * g[k] for k in cur}
        for k in p:
            np.testing.assert_allclose(out[k].value, cur[k], rtol=1e-10, atol=1e-12)

    def test_reports_step_on_non_finite(self):
        calls = []

        def loss(p):
            calls.append(1)
            if len(calls) == 2:
                return ad.log(ad.sub(p["w"], 10.0))
            return p["w"] * p["w"]

        with pytest.raises(NonFiniteError, match="inner step 2"):
            adapt({"w": ad.leaf(1.0)}, loss, 3, 0.1)

    def test_rejects_bad_inputs(self):
        task = sample_task(DS, SamplerConfig(5, 1, 2), np.random.default_rng(0))
        with pytest.raises(ValueError):
            inner_adapt(init_params(ARCH, 0).as_leaves(), task.support, 1, 0.0, 0.0)
        with pytest.raises(ValueError):
            adapt({"w": ad.leaf(1.0)}, lambda p: p["w"], 0, 0.1)


class TestOuterStep:
    def test_composite_sgd_update(self):
        theta = ParamSet({"w": np.array(1.0)})
        leaves = theta.as_leaves()
        adapted = adapt(leaves, lambda p: p["w"] * p["w"], 1, 0.1)
        outer = (adapted["w"] - 1.0) * (adapted["w"] - 1.0)
        new, grads = apply_meta_update(theta, leaves, [outer], SGD(1.0))
        assert float(grads["w"]) == pytest.approx(-0.32, abs=1e-10)
        assert float(new["w"]) == pytest.approx(1.32, abs=1e-10)

    def test_first_order_composite(self):
        theta = ParamSet({"w": np.array(1.0)})
        leaves = theta.as_leaves()
        adapted = adapt(leaves, lambda p: p["w"] * p["w"], 1, 0.1, second_order=False)
        outer = (adapted["w"] - 1.0) * (adapted["w"] - 1.0)
        _, grads = apply_meta_update(theta, leaves, [outer], SGD(1.0))
        assert float(grads["w"]) == pytest.approx(-0.4, abs=1e-12)

    @pytest.mark.parametrize("steps", [1, 5])
    def test_second_order_matches_finite_differences(self, steps):
        p, sx, sy, qx, qy = toy_task()
        grads = engine_meta_grad(p, sx, sy, qx, qy, steps, 0.5, 0.0)
        err = ad.finite_difference_check(
            lambda q: np_meta_loss(q, sx, sy, qx, qy, steps, 0.5, 0.0), dict(p), grads, 1e-5)
        assert err < 1e-3

    def test_second_order_with_penalty(self):
        p, sx, sy, qx, qy = toy_task(5)
        grads = engine_meta_grad(p, sx, sy, qx, qy, 2, 0.5, 2.0)
        err = ad.finite_difference_check(
            lambda q: np_meta_loss(q, sx, sy, qx, qy, 2, 0.5, 2.0), dict(p), grads, 1e-5)
        assert err < 1e-3

    def test_first_order_differs(self):
        p, sx, sy, qx, qy = toy_task()
        so = engine_meta_grad(p, sx, sy, qx, qy, 1, 0.5, 0.0, True)
        fo = engine_meta_grad(p, sx, sy, qx, qy, 1, 0.5, 0.0, False)
        assert max(np.abs(so[k] - fo[k]).max() for k in so) > 1e-6

    def test_requires_revealed_labels(self):
        p = init_params(ARCH, 0)
        leaves = p.as_leaves()
        task = sample_task(DS, SamplerConfig(5, 1, 2), np.random.default_rng(0))
        adapted = inner_adapt(leaves, task.support, 1, 0.01, 0.0)
        with pytest.raises(LabelError):
            outer_step(p, leaves, [(adapted, task.query_sets[0])], 0.0, Adam())
        revealed = reveal_labels(task, 0).query_sets[0]
        c = CostCounters()
        new = outer_step(p, leaves, [(adapted, revealed)], 0.0, Adam(), c)
        assert not new.allclose(p)
        assert (c.outer_forward, c.outer_backward) == (1, 1)

    def test_adam_first_step(self):
        opt = Adam(0.001)
        new = opt.step({"w": np.array([1.0, -2.0])}, {"w": np.array([0.5, -3.0])})
        # bias-corrected first step moves each coordinate by lr * g / (|g| + eps)
        np.testing.assert_allclose(new["w"], [1.0 - 0.001 * 0.5 / (0.5 + 1e-8), -2.0 + 0.001 * 3 / (3 + 1e-8)], rtol=1e-12)
        assert opt.t == 1 and opt.m["w"].shape == (2,)


class TestSelection:
    def test_examples(self):
        assert select([0.2, 0.9, 0.5], 1) == [1]
        assert select([0.3, 0.3, 0.3], 2) == [0, 1]
        assert select([0.5, 0.5, 0.7], 2) == [2, 0]

    def test_too_many(self):
        with pytest.raises(ValueError):
            select([0.1], 2)

    def test_fixture_tie(self):
        scores = [TaskBelief(0.9, 0.1), TaskBelief(0.2, 0.8)]
        assert [task_uncertainty(s, 0.5) for s in scores] == [0.5, 0.5]
        assert select(scores, 1) == [0]

    # power-of-two factors scale floats exactly, so ties and order survive
    @given(st.lists(st.floats(0, 1, allow_subnormal=False), min_size=1, max_size=12),
           st.integers(-30, 30).map(lambda n: 2.0 ** n), st.integers(1, 12))
    def test_scale_invariance(self, unc, c, k):
        k = min(k, len(unc))
        assert select(unc, k) == select([u * c for u in unc], k)

    def test_score_task_zero_model_ties(self):
        arch = Architecture(4, 5, (8,))
        task = sample_task(DS, SamplerConfig(5, 1, 2, queries_per_task=4), np.random.default_rng(2))
        c = CostCounters()
        # zero params stay zero in the hidden layer, so every query sees the same evidence
        scores = score_task(zero_params(arch), task, 1.0, 2, 0.01, 0.0, c)
        assert len(scores) == 4 and len({round(s.vb, 15) for s in scores}) == 1
        assert all(s.ib is None and s.unc == s.vb for s in scores)
        assert c.selection_forward == 4 and c.inner_forward == 2
        assert select(scores, 1) == [0]


def ml_config(**kw):
    base = dict(mode="ML", tasks_per_iter=2, inner_steps=5, candidate_pool=16, epochs=1, iters_per_epoch=3)
    base.update(kw)
    return MetaConfig(**base)


class TestTrain:
    def _deltas(self, cfg):
        snaps = []
        res = train(DS, ARCH, cfg, sinks=[lambda r: snaps.append((r["fwd_count"], r["bwd_count"]))])
        return res, snaps

    def test_ml_counter_trace(self):
        res, snaps = self._deltas(ml_config())
        c = res.counters
        assert (c.inner_forward, c.inner_backward, c.selection_forward, c.outer_backward) == (30, 30, 48, 6)
        assert c.labeled_query_sets == 6 and c.labeled_support_sets == 6
        steps = np.diff([(0, 0)] + snaps, axis=0)
        assert all(tuple(s) == (10 + 16, 10 + 2) for s in steps)

    def test_nts_has_no_selection(self):
        res, _ = self._deltas(ml_config(mode="NTS"))
        c = res.counters
        assert c.selection_forward == 0
        assert (c.inner_forward, c.inner_backward, c.outer_forward, c.outer_backward) == (30, 30, 6, 6)

    def test_st_counts_discarded_support(self):
        res, _ = self._deltas(ml_config(mode="ST", candidate_pool=4))
        c = res.counters
        assert c.selection_forward == 12 and c.inner_forward == 3 * 4 * 5
        assert c.labeled_query_sets == 6 and c.labeled_support_sets == 12

    def test_warmup_skips_selection(self):
        res = train(DS, ARCH, ml_config(warmup=2))
        assert res.counters.selection_forward == 16

    def test_budget_halts(self):
        res = train(DS, ARCH, ml_config(iters_per_epoch=10, label_budget=7))
        assert res.iterations == 3 and res.counters.labeled_query_sets == 6

    def test_metric_rows(self):
        res = train(DS, ARCH, ml_config())
        assert [r["iter"] for r in res.rows] == [0, 1, 2]
        assert [r["labeled_query_sets"] for r in res.rows] == [2, 4, 6]
        for r in res.rows:
            assert r["mean_ib"] >= r["mean_cb"] / 2 - 1e-9
            assert len(format_metric_row(r)) == 13

    def test_deterministic(self):
        a = train(DS, ARCH, ml_config(seed=4))
        b = train(DS, ARCH, ml_config(seed=4))
        assert [format_metric_row(r) for r in a.rows] == [format_metric_row(r) for r in b.rows]
        assert a.params.allclose(b.params)
        assert not train(DS, ARCH, ml_config(seed=5)).params.allclose(a.params)

    def test_schedules_follow_epochs(self):
        cfg = ml_config(mode="NTS", epochs=3, iters_per_epoch=1, schedule=ScheduleConfig(lambda_horizon=2, eta_cap=4, eta_ramp_divisor=2))
        rows = train(DS, ARCH, cfg).rows
        assert [r["lambda"] for r in rows] == [0.99, pytest.approx(0.745), 0.5]
        assert [r["eta"] for r in rows] == [0.0, 2.0, 4.0]

    def test_learned_inner_rates_are_trained(self):
        res = train(DS, ARCH, ml_config(mode="NTS", learned_inner_rates=True, inner_steps=2, inner_lr=0.1))
        rates = {k: float(v) for k, v in res.params.items() if k.startswith("inner_lr.")}
        assert len(rates) == 2 * 2
        assert any(abs(r - 0.1) > 1e-6 for r in rates.values())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts_with_iteration(self):
        bad = make_synthetic(10, 4, 40, 3.0, 1.0, seed=0)
        huge = type(bad).from_arrays(bad.features * 1e300, bad.labels)
        with pytest.raises(TrainingError) as info:
            train(huge, ARCH, ml_config(mode="NTS"))
        assert info.value.iteration == 0

    def test_training_helps(self):
        cfg = MetaConfig(tasks_per_iter=2, inner_steps=3, inner_lr=0.5, outer_lr=0.01, iters_per_epoch=100)
        res = train(DS, ARCH, cfg)
        first = np.mean([r["train_loss"] for r in res.rows[:10]])
        last = np.mean([r["train_loss"] for r in res.rows[-10:]])
        assert last < first


class TestEvaluate:
    def test_threshold_examples(self):
        vac = np.array([0.1, 0.3, 0.6, 0.9])
        ok = np.array([True, True, False, False])
        rows = threshold_table(vac, ok, [1.0, 0.05, 0.5])
        assert (rows[0].coverage, rows[0].accuracy) == (1.0, 0.5)
        assert (rows[1].coverage, rows[1].accuracy) == (0.0, None)
        assert (rows[2].coverage, rows[2].accuracy) == (0.5, 1.0)

    def test_perfect_evidence_fixture(self):
        labels = [np.array([0, 1, 2, 3, 4] * 2), np.array([4, 3, 2, 1, 0] * 2)]
        evs = [np.eye(5)[lab] * 1e6 for lab in labels]
        rep = summarize(evs, labels, [0.01, 0.5, 1.0])
        assert rep.accuracy == 1.0 and rep.accuracy_stderr == 0.0
        assert all(t.accuracy == 1.0 and t.coverage == 1.0 for t in rep.thresholds)
        assert rep.mean_vb < 1e-5 and rep.mean_ib < 1e-5

    def test_report_shapes(self):
        p = init_params(ARCH, 0)
        rep = evaluate(p, DS, MetaConfig(), 5, thresholds=(0.5, 1.0),
                       ood={"kind": "feature-shift", "magnitudes": [1.0, 5.0]}, seed=1)
        assert rep.num_tasks == 5 and rep.num_queries == 50
        assert rep.thresholds[-1].coverage == 1.0
        assert rep.thresholds[-1].accuracy == pytest.approx(rep.accuracy)
        assert [o.magnitude for o in rep.ood] == [1.0, 5.0]
        again = evaluate(p, DS, MetaConfig(), 5, thresholds=(0.5, 1.0), seed=1)
        assert again.accuracy == rep.accuracy and again.mean_vacuity == rep.mean_vacuity

    def test_rejects_zero_tasks(self):
        with pytest.raises(ValueError):
            evaluate(init_params(ARCH, 0), DS, MetaConfig(), 0)


def test_derive_seed_streams():
    assert derive_seed(0, "init") == derive_seed(0, "init")
    assert len({derive_seed(0, s) for s in ("init", "sampler", "train-data", "eval-data")}) == 4
    assert derive_seed(1, "init") != derive_seed(0, "init")
    assert 0 <= derive_seed(123, "x") < 2 ** 64


def test_metric_format():
    row = {"iter": 3, "epoch": 0, "mode": "ML", "lambda": 0.99, "eta": 0.0, "mean_vb": 1 / 3,
           "mean_cb": math.pi, "mean_ib": None, "mean_unc_selected": 1e-7, "train_loss": 123456789.0,
           "labeled_query_sets": 8, "fwd_count": 12, "bwd_count": 10}
    assert format_metric_row(row) == ["3", "0", "ML", "0.99", "0", "0.333333", "3.14159", "NA", "1e-07",
                                      "1.23457e+08", "8", "12", "10"]


@pytest.mark.parametrize("kw,key", [
    (dict(inner_steps=0), "meta.inner_steps"), (dict(mode="XX"), "meta.mode"),
    (dict(mode="ML", candidate_pool=3), "meta.candidate_pool"), (dict(inner_lr=-1.0), "meta.inner_lr"),
    (dict(warmup=-1), "meta.warmup"), (dict(label_budget=0), "meta.label_budget"),
])
def test_config_validation(kw, key):
    from beliefmeta.errors import ConfigError
    with pytest.raises(ConfigError) as info:
        MetaConfig(**kw).validate()
    assert info.value.key == key
