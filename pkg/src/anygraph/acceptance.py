"""Acceptance criteria as runnable checks.

Each ``criterion_N`` function runs one check at its stated tolerance and
returns a :class:`CriterionResult`. The pytest suite and ``anygraph suite
acceptance`` both call :func:`run_all`. Desk scenarios (graph families,
sizes, step counts) are module constants so both entry points agree.
"""

from __future__ import annotations

import math
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .evaluation import (
    evaluate_model,
    link_metrics,
    macro_f1,
    ndcg_at_k,
    random_recall_baseline,
    weighted_mean,
)
from .graph_store import GraphDataset, gen_synthetic, split_edges
from .moe_router import recalibration_factor
from .sparse_linalg import truncated_svd
from .testkit import (
    exact_svd_small,
    finite_diff_grad,
    max_relative_error,
    mp_softmax_loss,
)
from .trainer import Trainer, softmax_loss

__all__ = ["CriterionResult", "CRITERIA", "run_all", "run_criterion"]

# Desk scenarios ---------------------------------------------------------------

SBM_STRONG = {"blocks": 20, "p_in": 0.3, "p_out": 0.003}
BIPARTITE_STRONG = {"groups": 10, "p_in": 0.3, "p_out": 0.003}
MIX_FAMILIES = [
    ("sbm", {"blocks": 5, "p_in": 0.2, "p_out": 0.01}),
    ("bipartite", {"groups": 4, "p_in": 0.2, "p_out": 0.01}),
    ("ba", {"m": 3}),
    ("grid", {"rows": 10}),
]
SBM_FEATURED = {"blocks": 10, "p_in": 0.1, "p_out": 0.01, "feat_dim": 16, "feat_noise": 0.3}
DESK_LR = 1e-2
SEEDS = range(10)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    seconds: float = 0.0
    budget: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        over = "" if self.seconds <= self.budget else f" (over {self.budget:.0f}s budget)"
        summary = ", ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items() if not isinstance(v, (list, dict)))
        return f"criterion {self.number:2d} {self.name}: {verdict} [{self.seconds:.1f}s{over}] {summary}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _split(family: str, n: int, params: dict, seed: int, name: str, ratio: float = 0.2) -> GraphDataset:
    return split_edges(gen_synthetic(family, n, params, seed=seed, name=name), ratio, seed)


def _desk(seed: int, steps: int, experts: int = 4, dim: int = 64, layers: int = 2, **train) -> RunConfig:
    train.setdefault("lr", DESK_LR)
    return RunConfig.desk(dim=dim, layers=layers, experts=experts, max_steps=steps, seed=seed, **train)


# 1 ----------------------------------------------------------------------------

def criterion_1(seeds=SEEDS) -> CriterionResult:
    """Analytic vs central-difference gradients through expert and loss."""
    worst = 0.0
    for seed in seeds:
        g = _split("sbm", 40, {"blocks": 4, "p_in": 0.3, "p_out": 0.05}, seed, f"grad{seed}")
        for mode in ("full", "sampled"):
            cfg = RunConfig.desk(dim=8, layers=3, experts=1, batch_size=16, dropout_p=0.0,
                                 neg_mode=mode, num_neg=7, seed=seed)
            tr = Trainer([g], cfg)
            batch = tr._next_batch()
            _, grads = tr.batch_loss(batch, 0, 0)
            params = tr.model.experts[0].named()
            numeric = finite_diff_grad(lambda: tr.batch_loss(batch, 0, 0)[0], params, h=1e-6)
            for name, grad in grads.items():
                worst = max(worst, max_relative_error(grad, numeric[name]))
    return CriterionResult(1, "gradient-correctness", worst < 1e-4, budget=60,
                           detail={"max_rel_err": worst, "tol": 1e-4})


# 2 ----------------------------------------------------------------------------

def _gapped_matrix(rng: np.random.Generator, rank: int, rows: int = 50, cols: int = 40) -> np.ndarray:
    u, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
    head = np.geomspace(10.0, 1.0, rank)
    tail = 0.1 * np.sort(rng.uniform(0.0, 1.0, cols - rank))[::-1]
    return (u * np.concatenate([head, tail])) @ v.T


def criterion_2(count: int = 20, rank: int = 10) -> CriterionResult:
    rng = np.random.default_rng(20240)
    worst_sv, worst_ratio = 0.0, 0.0
    for i in range(count):
        a = _gapped_matrix(rng, rank)
        exact = exact_svd_small(a)
        f = truncated_svd(a, rank, power_iters=2, seed=i)
        worst_sv = max(worst_sv, float(np.max(np.abs(f.S - exact.S[:rank]) / exact.S[:rank])))
        optimal = math.sqrt(float(np.sum(exact.S[rank:] ** 2)))
        worst_ratio = max(worst_ratio, float(np.linalg.norm(f.reconstruct() - a)) / optimal)
    ok = worst_sv <= 1e-3 and worst_ratio <= 1.5
    return CriterionResult(2, "svd-fidelity", ok, budget=60,
                           detail={"max_sv_rel_err": worst_sv, "max_frob_ratio": worst_ratio})


# 3 ----------------------------------------------------------------------------

def criterion_3(trials: int = 200) -> CriterionResult:
    rng = np.random.default_rng(3)
    worst_small = 0.0
    for _ in range(trials):
        scores = rng.uniform(-30.0, 30.0, size=int(rng.integers(2, 50)))
        target = int(rng.integers(0, scores.size))
        loss, _ = softmax_loss(scores[None, :], target)
        worst_small = max(worst_small, abs(loss - mp_softmax_loss(scores, target)))
    finite = True
    worst_large = 0.0
    for _ in range(trials):
        scores = rng.uniform(-1e4, 1e4, size=(4, 20))
        target = rng.integers(0, 20, size=4)
        loss, prob = softmax_loss(scores, target)
        finite &= math.isfinite(loss) and bool(np.all(np.isfinite(prob)))
        oracle = float(np.mean([mp_softmax_loss(scores[b], int(target[b])) for b in range(4)]))
        worst_large = max(worst_large, abs(loss - oracle) / max(1.0, abs(oracle)))
    ok = worst_small <= 1e-10 and finite and worst_large <= 1e-6
    return CriterionResult(3, "loss-stability", ok, budget=10,
                           detail={"max_abs_err_|s|<=30": worst_small, "finite_at_1e4": finite,
                                   "max_rel_err_1e4": worst_large})


# 4 ----------------------------------------------------------------------------

def criterion_4(trials: int = 2000) -> CriterionResult:
    rng = np.random.default_rng(4)
    bounds_ok = iff_ok = True
    for _ in range(trials):
        k = int(rng.integers(1, 10))
        m = rng.integers(0, 50, size=k)
        rho = float(rng.choice([0.0, 0.2, rng.uniform(0.0, 2.0)]))
        f = recalibration_factor(m, rho)
        bounds_ok &= bool(np.all(f >= 1 - rho / 2) and np.all(f <= 1 + rho / 2))
        if rho > 0 and m.sum() > 0:
            share = m / m.sum()
            iff_ok &= bool(np.all((f < 1.0) == (share > 0.5)))
    k1 = float(recalibration_factor(np.array([7]), 0.2)[0])
    ok = bounds_ok and iff_ok and k1 == 0.9
    return CriterionResult(4, "recalibration-algebra", ok, budget=1,
                           detail={"bounds": bounds_ok, "handicap_iff_share>0.5": iff_ok, "K1_factor": k1})


# 5 ----------------------------------------------------------------------------

COLLAPSE_STEPS = 4000


def _mix(seed: int, n: int = 200) -> list[GraphDataset]:
    return [_split(fam, n, p, 100 * seed + i, fam, 0.2) for i, (fam, p) in enumerate(MIX_FAMILIES)]


def criterion_5(seeds=SEEDS, steps: int = COLLAPSE_STEPS) -> CriterionResult:
    spread_seeds = 0
    collapse = {0.2: 0, 0.0: 0}
    counters = {}
    for seed in seeds:
        data = _mix(seed)
        for rho in (0.2, 0.0):
            tr = Trainer(data, _desk(seed, steps, rho=rho))
            tr.run()
            share = tr.router.m / tr.router.m.sum()
            counters[f"{seed}/{rho}"] = tr.router.m.tolist()
            if share.max() > 0.9:
                collapse[rho] += 1
            if rho == 0.2 and int(np.sum(share >= 0.1)) >= 2:
                spread_seeds += 1
    need = math.ceil(0.8 * len(seeds))
    ok = spread_seeds >= need and collapse[0.0] > collapse[0.2]
    return CriterionResult(5, "anti-collapse", ok, budget=600, detail={
        "spread_seeds_rho0.2": spread_seeds, "needed": need,
        "collapsed_rho0.2": collapse[0.2], "collapsed_rho0": collapse[0.0], "counters": counters,
    })


# 6 ----------------------------------------------------------------------------

ZERO_SHOT_STEPS = 2000


def _transfer_data(seed: int, n: int = 500):
    train = [_split("sbm", n, SBM_STRONG, 1000 * seed + i, f"sbm{i}") for i in range(3)]
    train.append(_split("bipartite", n, BIPARTITE_STRONG, 1000 * seed + 9, "bip0"))
    test = [_split("sbm", n, SBM_STRONG, 1000 * seed + 100, "sbm-heldout"),
            _split("bipartite", n, BIPARTITE_STRONG, 1000 * seed + 101, "bip-heldout")]
    return train, test


def _zero_shot(train, test, cfg: RunConfig) -> float:
    tr = Trainer(train, cfg)
    tr.run()
    report = evaluate_model(tr.model, tr.router, tr.config.embed, tr.seed, test)
    return report.aggregate["recall@20"]


def criterion_6(seeds=SEEDS, steps: int = ZERO_SHOT_STEPS) -> CriterionResult:
    ratios, moe_wins, rows = [], 0, []
    for seed in seeds:
        train, test = _transfer_data(seed)
        base = weighted_mean([random_recall_baseline(g) for g in test], [len(g.test_edges) for g in test])
        moe = _zero_shot(train, test, _desk(seed, steps, experts=4))
        single = _zero_shot(train, test, _desk(seed, steps, experts=4, moe_off=True))
        ratios.append(moe / base)
        moe_wins += moe >= single
        rows.append([seed, base, moe, single])
    need = math.ceil(0.7 * len(seeds))
    ok = min(ratios) >= 5.0 and moe_wins >= need
    return CriterionResult(6, "zero-shot-transfer", ok, budget=1200, detail={
        "min_ratio_to_random": min(ratios), "moe>=single_seeds": moe_wins, "needed": need,
        "rows[seed,baseline,moe,single]": rows,
    })


# 7 ----------------------------------------------------------------------------

FEAT_STEPS = 1000


def criterion_7(seeds=SEEDS, steps: int = FEAT_STEPS) -> CriterionResult:
    drops, rows = 0, []
    for seed in seeds:
        train = [_split("sbm", 500, SBM_FEATURED, 1000 * seed + i, f"feat{i}") for i in range(3)]
        test = [_split("sbm", 500, SBM_FEATURED, 1000 * seed + 100 + i, f"feat-heldout{i}") for i in range(2)]
        full = _zero_shot(train, test, _desk(seed, steps))
        nofeat = _zero_shot(train, test, _desk(seed, steps, feat_off=True))
        drops += nofeat < full
        rows.append([seed, full, nofeat])
    need = math.ceil(0.8 * len(seeds))
    return CriterionResult(7, "feat-ablation", drops >= need, budget=900,
                           detail={"seeds_with_drop": drops, "needed": need, "rows[seed,full,-feat]": rows})


# 8 ----------------------------------------------------------------------------

def _median_step_time(g: GraphDataset, experts: int, batches: int) -> float:
    cfg = RunConfig.desk(dim=128, layers=4, experts=experts, batch_size=256, aug_off=True, seed=0)
    tr = Trainer([g], cfg)
    for _ in range(10):
        tr.step()
    times = []
    for _ in range(batches):
        t0 = time.perf_counter()
        tr.step()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def criterion_8(batches: int = 200) -> CriterionResult:
    g = _split("sbm", 1000, {"blocks": 10, "p_in": 0.05, "p_out": 0.002}, 8, "timing")
    t1 = _median_step_time(g, 1, batches)
    t8 = _median_step_time(g, 8, batches)
    return CriterionResult(8, "one-expert-cost", t8 <= 1.3 * t1, budget=300,
                           detail={"median_K1_ms": 1e3 * t1, "median_K8_ms": 1e3 * t8, "ratio": t8 / t1})


# 9 ----------------------------------------------------------------------------

def _persist_data():
    return [_split(fam, 150, p, 90 + i, fam) for i, (fam, p) in enumerate(MIX_FAMILIES[:3])]


def _metrics(tr: Trainer, test) -> np.ndarray:
    rep = evaluate_model(tr.model, tr.router, tr.config.embed, tr.seed, test)
    return np.array([rep.per_dataset[g.name]["recall@20"] for g in test]
                    + [rep.per_dataset[g.name]["ndcg@20"] for g in test])


def _params(tr: Trainer) -> np.ndarray:
    return np.concatenate([a.ravel() for e in tr.model.experts for a in e.named().values()])


def criterion_9(steps: int = 300, split_at: int = 137) -> CriterionResult:
    data = _persist_data()
    test = [_split("sbm", 150, MIX_FAMILIES[0][1], 777, "persist-heldout")]
    cfg = _desk(5, steps, experts=2, dim=32, reproject_min_steps=20)

    a = Trainer(data, cfg)
    a.run()
    b = Trainer(data, cfg)
    b.run()
    rerun = float(np.max(np.abs(_metrics(a, test) - _metrics(b, test))))

    part = Trainer(data, cfg)
    part.run(split_at)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(part, Path(tmp) / "mid.ckpt")
        resumed = load_checkpoint(path, expect=cfg).trainer(data)
    resumed.run()
    resume_metric = float(np.max(np.abs(_metrics(a, test) - _metrics(resumed, test))))
    resume_param = float(np.max(np.abs(_params(a) - _params(resumed))))
    ok = rerun <= 1e-9 and resume_metric <= 1e-9 and resume_param <= 1e-9
    return CriterionResult(9, "determinism-persistence", ok, budget=300, detail={
        "rerun_metric_diff": rerun, "resume_metric_diff": resume_metric, "resume_param_diff": resume_param,
        "reroutes": a.router.route_epoch,
    })


# 10 ---------------------------------------------------------------------------

def criterion_10() -> CriterionResult:
    ndcg = ndcg_at_k([5, 7, 9], [7]) == 1.0 / math.log2(3)
    # the batched evaluator on a graph where the anchor's only test partner ranks 2nd
    g = GraphDataset("ndcg", 4, np.array([[0, 1], [0, 2], [0, 3]]), test_mask=np.array([False, True, False]))
    emb = np.array([[1.0, 0.0], [0.0, 0.0], [0.5, 0.0], [0.9, 0.0]])
    batched = link_metrics(emb, g, exclude_train=False)["ndcg@20"] == 1.0 / math.log2(3)
    agg = weighted_mean([1.0, 0.0], [10, 30]) == 0.25
    f1 = macro_f1(np.array([0, 0, 1, 1]), np.array([0, 0, 0, 0]), 2) == 1.0 / 3.0
    ok = ndcg and batched and agg and f1
    return CriterionResult(10, "metric-units", ok, budget=1, detail={
        "ndcg_rank2": ndcg, "ndcg_batched": batched, "weighted_0.25": agg, "macro_f1_1/3": f1,
    })


CRITERIA: dict[int, Callable[[], CriterionResult]] = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
    6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10,
}


def run_criterion(number: int) -> CriterionResult:
    t0 = time.perf_counter()
    result = CRITERIA[number]()
    result.seconds = time.perf_counter() - t0
    return result


def run_all(numbers=None, echo: Callable[[str], None] | None = None) -> list[CriterionResult]:
    results = []
    for n in numbers or sorted(CRITERIA):
        r = run_criterion(n)
        if echo is not None:
            echo(r.line())
        results.append(r)
    return results
