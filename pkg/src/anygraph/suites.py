"""Scaling ladder and ablation runs that emit one metrics row per config."""

from __future__ import annotations

import csv
import io
import itertools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .config import ABLATIONS, RunConfig
from .evaluation import evaluate_model
from .graph_store import GraphDataset, gen_synthetic, split_edges
from .trainer import Trainer

__all__ = [
    "LADDER_DIMS",
    "LADDER_LAYERS",
    "LADDER_EXPERTS",
    "ABLATION_VARIANTS",
    "desk_datasets",
    "train_and_eval",
    "scaling_suite",
    "ablation_suite",
    "rows_to_csv",
]

LADDER_DIMS = (32, 64, 128)
LADDER_LAYERS = (1, 2, 4)
LADDER_EXPERTS = (1, 2, 4)
ABLATION_VARIANTS = ("full",) + tuple(f"-{a}" for a in ABLATIONS)


def desk_datasets(seed: int, nodes: int = 300, test_ratio: float = 0.2):
    """Three SBM graphs and one bipartite graph to train on, one of each to hold out."""
    sbm = {"blocks": 10, "p_in": 0.3, "p_out": 0.003, "feat_dim": 16, "feat_noise": 0.3}
    bip = {"groups": 6, "p_in": 0.3, "p_out": 0.003}

    def make(fam, params, s, name):
        return split_edges(gen_synthetic(fam, nodes, params, seed=s, name=name), test_ratio, s)

    train = [make("sbm", sbm, 1000 * seed + i, f"sbm{i}") for i in range(3)]
    train.append(make("bipartite", bip, 1000 * seed + 9, "bip0"))
    test = [make("sbm", sbm, 1000 * seed + 100, "sbm-heldout"),
            make("bipartite", bip, 1000 * seed + 101, "bip-heldout")]
    return train, test


def train_and_eval(cfg: RunConfig, train: list[GraphDataset], test: list[GraphDataset]) -> dict:
    t0 = time.perf_counter()
    tr = Trainer(train, cfg)
    tr.run()
    seconds = time.perf_counter() - t0
    zero = evaluate_model(tr.model, tr.router, tr.config.embed, tr.seed, test).aggregate
    full = evaluate_model(tr.model, tr.router, tr.config.embed, tr.seed, train, mode="full_shot").aggregate
    mc = tr.config.model
    return {
        "dim": mc.dim,
        "layers": mc.layers,
        "experts": mc.num_experts,
        "params": mc.param_count,
        "steps": tr.step_count,
        "zero_shot_recall@20": zero["recall@20"],
        "zero_shot_ndcg@20": zero["ndcg@20"],
        "full_shot_recall@20": full["recall@20"],
        "full_shot_ndcg@20": full["ndcg@20"],
        "final_loss": tr.history[-1].loss if tr.history else float("nan"),
        "train_seconds": seconds,
    }


def _run_job(job):
    label, cfg, train, test = job
    row = train_and_eval(cfg, train, test)
    return {**label, **row}


def _map(jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def scaling_suite(
    base: RunConfig,
    train: list[GraphDataset],
    test: list[GraphDataset],
    dims=LADDER_DIMS,
    layers=LADDER_LAYERS,
    experts=LADDER_EXPERTS,
    workers: int = 1,
) -> list[dict]:
    jobs = []
    for d, lp, k in itertools.product(dims, layers, experts):
        cfg = replace(
            base,
            embed=replace(base.embed, dim=d),
            model=replace(base.model, dim=d, layers=lp, num_experts=k),
        )
        jobs.append(({"config": f"d{d}-L{lp}-K{k}"}, cfg, train, test))
    return _map(jobs, workers)


def ablation_suite(
    base: RunConfig, train: list[GraphDataset], test: list[GraphDataset], workers: int = 1
) -> list[dict]:
    jobs = [({"variant": "full"}, base, train, test)]
    for name in ABLATIONS:
        jobs.append(({"variant": f"-{name}"}, base.with_ablation(name), train, test))
    return _map(jobs, workers)


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
