import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anygraph.config import RunConfig
from anygraph.graph_store import GraphDataset, gen_synthetic, split_edges
from anygraph.testkit import brute_force_softmax_loss, finite_diff_grad, max_relative_error, mp_softmax_loss
from anygraph.trainer import (
    AdamState,
    Trainer,
    TrainingDivergedError,
    adam_step,
    build_schedule,
    loss_and_grad,
    reprojection_interval,
    softmax_loss,
)


def _chain(name, n_edges):
    edges = np.array([[i, i + 1] for i in range(n_edges)])
    return GraphDataset(name, n_edges + 1, edges)


# --- schedule -----------------------------------------------------------------

def test_schedule_slot_counts():
    sched = build_schedule([_chain("a", 10), _chain("b", 6)], 4, 0, 0)
    assert len(sched) == 5
    assert sorted(b.dataset for b in sched) == ["a", "a", "a", "b", "b"]


def test_schedule_covers_every_edge_once():
    g = _chain("a", 23)
    sched = build_schedule([g], 5, epoch=2, seed=1)
    seen = np.concatenate([b.pos for b in sched])
    canon = {tuple(sorted(e)) for e in seen.tolist()}
    assert len(seen) == 23 and canon == {tuple(e) for e in g.edges.tolist()}


def test_schedule_epochs_differ():
    g = _chain("a", 40)
    e0 = np.concatenate([b.pos for b in build_schedule([g], 8, 0, 0)])
    e1 = np.concatenate([b.pos for b in build_schedule([g], 8, 1, 0)])
    assert not np.array_equal(e0, e1)


# --- loss -----------------------------------------------------------------------

def test_uniform_loss_is_log_n():
    emb = np.zeros((4, 3))
    loss, _ = loss_and_grad(emb, np.array([[0, 1]]))
    assert loss == pytest.approx(math.log(4), abs=1e-15)


def test_loss_examples_against_oracles():
    assert softmax_loss(np.array([[1.0, 0.0, 0.0]]), 0)[0] == pytest.approx(0.551445, abs=1e-6)
    assert brute_force_softmax_loss([1.0, 0.0, 0.0]) == pytest.approx(0.5514447139, abs=1e-10)


def test_dominant_positive_loss_vanishes():
    loss, _ = softmax_loss(np.array([[500.0, 0.0, -3.0]]), 0)
    assert loss == pytest.approx(0.0, abs=1e-200)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=40), st.data())
def test_softmax_loss_matches_brute_force(scores, data):
    target = data.draw(st.integers(0, len(scores) - 1))
    loss, prob = softmax_loss(np.array([scores]), target)
    assert loss == pytest.approx(brute_force_softmax_loss(scores, target), abs=1e-10)
    assert prob.sum() == pytest.approx(1.0)


def test_loss_finite_at_extreme_scores():
    scores = np.array([[1e4, -1e4, 9999.0], [-1e4, -1e4 + 1, -9e3]])
    loss, prob = softmax_loss(scores, [1, 2])
    oracle = np.mean([mp_softmax_loss(scores[0], 1), mp_softmax_loss(scores[1], 2)])
    assert np.isfinite(loss) and np.all(np.isfinite(prob))
    assert loss == pytest.approx(oracle, rel=1e-6)


@pytest.mark.parametrize("mode", ["full", "sampled"])
def test_loss_gradient_wrt_embeddings(mode):
    rng = np.random.default_rng(4)
    emb = rng.standard_normal((12, 5))
    pos = rng.integers(0, 12, size=(6, 2))
    negs = rng.integers(0, 12, size=(6, 4)) if mode == "sampled" else None
    _, grad = loss_and_grad(emb, pos, negs)
    numeric = finite_diff_grad(lambda: loss_and_grad(emb, pos, negs)[0], emb)
    assert max_relative_error(grad, numeric) < 1e-6


def test_loss_rejects_nonfinite():
    emb = np.ones((3, 2))
    emb[0, 0] = np.nan
    with pytest.raises(ValueError):
        loss_and_grad(emb, np.array([[0, 1]]))


# --- adam -----------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    adam_step(p, {"w": np.array([0.5, -4.0, 1e-3])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"], [0.99, -1.99, 2.99], atol=1e-7)


def test_adam_zero_grad_keeps_params():
    p = {"w": np.array([1.0, 2.0])}
    st_ = AdamState()
    for _ in range(20):
        adam_step(p, {"w": np.zeros(2)}, st_, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)


# --- training loop ----------------------------------------------------------------

def _data(n=120):
    fams = [("sbm", {"blocks": 4, "p_in": 0.2, "p_out": 0.01}), ("ba", {"m": 2})]
    return [split_edges(gen_synthetic(f, n, p, seed=i, name=f), 0.2, i) for i, (f, p) in enumerate(fams)]


def _cfg(**kw):
    base = dict(dim=16, layers=2, experts=3, lr=1e-2, batch_size=64, reproject_min_steps=10)
    dims = {k: base.pop(k) for k in ("dim", "layers", "experts")}
    base.update(kw)
    return RunConfig.desk(**dims, **base)


def test_identical_runs_bit_identical():
    a = Trainer(_data(), _cfg(max_steps=60))
    b = Trainer(_data(), _cfg(max_steps=60))
    a.run()
    b.run()
    for ea, eb in zip(a.model.experts, b.model.experts):
        for x, y in zip(ea.named().values(), eb.named().values()):
            assert x.tobytes() == y.tobytes()
    assert [r.loss for r in a.history] == [r.loss for r in b.history]


def test_only_assigned_expert_changes():
    tr = Trainer(_data(), _cfg())
    before = [e.copy() for e in tr.model.experts]
    rec = tr.step()
    for k, (old, new) in enumerate(zip(before, tr.model.experts)):
        same = all(np.array_equal(x, y) for x, y in zip(old.named().values(), new.named().values()))
        assert same == (k != rec.expert)
    assert tr.router.m[rec.expert] == 1


def test_loss_decreases():
    tr = Trainer(_data(), _cfg(max_steps=200))
    tr.run()
    losses = [r.loss for r in tr.history]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_moe_off_single_expert():
    tr = Trainer(_data(), _cfg(moe_off=True, max_steps=30))
    tr.run()
    assert tr.model.num_experts == 1 and set(tr.router.assignment.values()) == {0}


def test_aug_off_no_reprojection_or_reroute():
    tr = Trainer(_data(), _cfg(aug_off=True, max_steps=80))
    tr.run()
    assert all(tr.embedding(g.name).aug_epoch == 0 for g in tr.datasets)
    assert tr.router.route_epoch == 0


def test_reprojection_cadence_matches_interval():
    # 200 train edges, B=4: one reprojection per ceil(200 / 40) = 5 steps of the dataset
    g = _chain("c", 200)
    g = g.replace(test_mask=np.zeros(200, dtype=bool))
    cfg = RunConfig.desk(dim=8, layers=1, experts=1, batch_size=4, reproject_min_steps=0,
                         max_steps=50, neg_mode="sampled", num_neg=4)
    tr = Trainer([g], cfg)
    assert reprojection_interval(200, 4) == 5
    assert tr.steps_per_epoch() == 50
    tr.run()
    assert tr.embedding("c").aug_epoch == 50 // 5
    # every dataset re-projected, so each reprojection also re-routes
    assert tr.router.route_epoch == 10


def test_reprojection_waits_for_warmup():
    g = _chain("c", 200).replace(test_mask=np.zeros(200, dtype=bool))
    cfg = RunConfig.desk(dim=8, layers=1, experts=1, batch_size=4, reproject_min_steps=30,
                         max_steps=29, neg_mode="sampled", num_neg=4)
    tr = Trainer([g], cfg)
    tr.run()
    assert tr.embedding("c").aug_epoch == 0
    tr.run(30)
    assert tr.embedding("c").aug_epoch == 1


def test_sampled_mode_runs():
    tr = Trainer(_data(), _cfg(neg_mode="sampled", num_neg=16, max_steps=20))
    tr.run()
    assert all(np.isfinite(r.loss) for r in tr.history)


def test_divergence_names_batch_and_expert():
    tr = Trainer(_data(), _cfg(moe_off=True, max_steps=5))
    tr.model.experts[0].weights[0][0, 0] = np.inf
    with pytest.raises(TrainingDivergedError, match="expert 0"):
        tr.run()


def test_progress_log_lines():
    buf = io.StringIO()
    tr = Trainer(_data(), _cfg(max_steps=20, log_every=5), log_stream=buf)
    tr.run()
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert [x["step"] for x in lines] == [5, 10, 15, 20]
    assert {"loss", "expert", "dataset", "aug_epochs", "lr"} <= set(lines[0])


def test_trainer_validation():
    with pytest.raises(ValueError):
        Trainer([], _cfg())
    g = _data()
    with pytest.raises(ValueError):
        Trainer([g[0], g[0]], _cfg())
