"""Link-prediction ranking metrics, class-node classification and the
zero-shot / full-shot evaluation driver.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .embed_init import EmbedConfig, initial_embedding
from .expert_net import MoEModel
from .graph_store import GraphDataset, attach_class_nodes, normalize_adjacency
from .moe_router import RouterState, route

__all__ = [
    "EvalReport",
    "ContaminationError",
    "rank_candidates",
    "recall_at_k",
    "ndcg_at_k",
    "link_metrics",
    "macro_f1",
    "classify_nodes",
    "weighted_mean",
    "random_recall_baseline",
    "evaluate",
    "evaluate_model",
]

TOP_K = 20


class ContaminationError(ValueError):
    """A zero-shot evaluation was asked to score a training dataset."""


@dataclass
class EvalReport:
    task: str
    mode: str
    per_dataset: dict[str, dict[str, float]] = field(default_factory=dict)
    aggregate: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {name: dict(vals) for name, vals in self.per_dataset.items()}
        out["aggregate"] = dict(self.aggregate)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        metrics = sorted({k for v in self.per_dataset.values() for k in v})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", *metrics])
        for name, vals in self.per_dataset.items():
            w.writerow([name, *(vals.get(m, "") for m in metrics)])
        w.writerow(["aggregate", *(self.aggregate.get(m, "") for m in metrics)])
        return buf.getvalue()


# --- ranking metrics ----------------------------------------------------------

def rank_candidates(emb: np.ndarray, anchor: int, exclude=()) -> np.ndarray:
    """Candidate node ids by descending dot product with ``anchor``.

    The anchor and ``exclude`` are left out; ties go to the lower node id.
    """
    n = emb.shape[0]
    keep = np.ones(n, dtype=bool)
    keep[anchor] = False
    keep[np.asarray(list(exclude), dtype=np.int64)] = False
    cand = np.flatnonzero(keep)
    if cand.size == 0:
        raise ValueError(f"anchor {anchor} has no candidates left after exclusion")
    scores = emb[cand] @ emb[anchor]
    return cand[np.argsort(-scores, kind="stable")]


def recall_at_k(ranking, relevant, k: int = TOP_K) -> float | None:
    """Share of ``relevant`` found in the top ``k``; ``None`` if nothing is relevant."""
    relevant = set(int(r) for r in relevant)
    if not relevant:
        return None
    hits = sum(1 for r in list(ranking)[:k] if int(r) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranking, relevant, k: int = TOP_K) -> float | None:
    relevant = set(int(r) for r in relevant)
    if not relevant:
        return None
    dcg = sum(
        1.0 / math.log2(pos + 2)
        for pos, r in enumerate(list(ranking)[:k])
        if int(r) in relevant
    )
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(k, len(relevant))))
    return dcg / idcg


def _neighbors(edges: np.ndarray, n: int) -> list[np.ndarray]:
    both = np.concatenate([edges, edges[:, ::-1]]) if len(edges) else edges.reshape(0, 2)
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    bounds = np.searchsorted(both[:, 0], np.arange(n + 1))
    return [both[bounds[i]:bounds[i + 1], 1] for i in range(n)]


def link_metrics(
    emb: np.ndarray,
    g: GraphDataset,
    k: int = TOP_K,
    exclude_train: bool = True,
    chunk: int = 512,
) -> dict[str, float]:
    """Per-anchor Recall@k / NDCG@k averaged over distinct test-edge sources.

    Candidates are all nodes except the anchor and (by default) its train
    neighbors; an anchor's relevant set is all of its test neighbors.
    """
    test = g.test_edges
    if len(test) == 0:
        raise ValueError(f"{g.name}: no test edges")
    n = g.num_nodes
    train_nb = _neighbors(g.train_edges, n)
    test_nb = _neighbors(test, n)
    anchors = np.unique(test[:, 0])

    # log discount table for ranks 1..k and ideal DCG by relevant-set size
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    ideal = np.concatenate([[0.0], np.cumsum(disc)])
    recalls, ndcgs = [], []
    for start in range(0, len(anchors), chunk):
        block = anchors[start:start + chunk]
        scores = emb[block] @ emb.T
        scores[np.arange(len(block)), block] = -np.inf
        if exclude_train:
            for row, a in enumerate(block):
                scores[row, train_nb[a]] = -np.inf
        top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        for row, a in enumerate(block):
            rel = test_nb[a]
            picked = top[row][np.isfinite(scores[row, top[row]])]
            hit = np.isin(picked, rel)
            recalls.append(hit.sum() / len(rel))
            ndcgs.append(float(disc[:len(picked)][hit].sum()) / ideal[min(k, len(rel))])
    return {
        f"recall@{k}": float(np.mean(recalls)),
        f"ndcg@{k}": float(np.mean(ndcgs)),
        "n_test": int(len(test)),
        "n_anchors": int(len(anchors)),
    }


def random_recall_baseline(g: GraphDataset, k: int = TOP_K, exclude_train: bool = True) -> float:
    """Expected Recall@k of a uniformly random ranking under :func:`link_metrics`."""
    n = g.num_nodes
    train_nb = _neighbors(g.train_edges, n)
    anchors = np.unique(g.test_edges[:, 0])
    vals = []
    for a in anchors:
        cand = n - 1 - (len(train_nb[a]) if exclude_train else 0)
        vals.append(min(1.0, k / cand))
    return float(np.mean(vals))


# --- classification --------------------------------------------------------------

def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1.

    Classes absent from both truth and predictions are skipped; a class that
    is predicted but never true scores 0.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    c = num_classes or int(max(y_true.max(), y_pred.max())) + 1
    scores = []
    for cls in range(c):
        tp = int(np.sum((y_pred == cls) & (y_true == cls)))
        fp = int(np.sum((y_pred == cls) & (y_true != cls)))
        fn = int(np.sum((y_pred != cls) & (y_true == cls)))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def classify_nodes(
    model: MoEModel,
    router: RouterState,
    g_aug: GraphDataset,
    embed_cfg: EmbedConfig,
    seed: int,
) -> dict[str, float]:
    """Predict each test node's class as its best-scoring class node.

    ``g_aug`` must come from :func:`attach_class_nodes`. Routing runs on the
    augmented graph with a copy of ``router``.
    """
    if g_aug.class_offset is None:
        raise ValueError(f"{g_aug.name}: attach class nodes before classifying")
    test_nodes = np.flatnonzero(g_aug.test_label_mask)
    if test_nodes.size == 0:
        raise ValueError(f"{g_aug.name}: no test-labeled nodes")
    adj = normalize_adjacency(g_aug, embed_cfg.self_loops)
    e1 = initial_embedding(g_aug, adj, embed_cfg, seed, 0)
    state = router.copy()
    k = route(model, e1, g_aug, state, seed)
    emb = model.embed(k, e1.e1)
    c = g_aug.num_classes
    class_emb = emb[g_aug.class_offset:g_aug.class_offset + c]
    pred = np.argmax(emb[test_nodes] @ class_emb.T, axis=1)
    truth = g_aug.labels[test_nodes]
    return {
        "acc": float(np.mean(pred == truth)),
        "macro_f1": macro_f1(truth, pred, c),
        "n_test": int(test_nodes.size),
        "expert": k,
    }


def weighted_mean(values, weights) -> float:
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    return float(np.sum(values * weights) / np.sum(weights))


# --- drivers ----------------------------------------------------------------

def evaluate_model(
    model: MoEModel,
    router: RouterState,
    embed_cfg: EmbedConfig,
    seed: int,
    datasets: list[GraphDataset],
    task: str = "link",
    mode: str = "zero_shot",
    k: int = TOP_K,
    exclude_train: bool = True,
) -> EvalReport:
    """Route every dataset with the frozen model and score it."""
    if task not in ("link", "node"):
        raise ValueError(f"unknown task {task!r}")
    if not datasets:
        raise ValueError("no datasets to evaluate")
    report = EvalReport(task=task, mode=mode)
    for g in datasets:
        if task == "link":
            adj = normalize_adjacency(g, embed_cfg.self_loops)
            e1 = initial_embedding(g, adj, embed_cfg, seed, 0)
            state = router.copy()
            expert = route(model, e1, g, state, seed)
            res = link_metrics(model.embed(expert, e1.e1), g, k, exclude_train)
            res["expert"] = expert
        else:
            if g.labels is None:
                raise ValueError(f"{g.name}: node classification needs labels")
            res = classify_nodes(model, router, attach_class_nodes(g), embed_cfg, seed)
        report.per_dataset[g.name] = res
    weights = [r["n_test"] for r in report.per_dataset.values()]
    metrics = [f"recall@{k}", f"ndcg@{k}"] if task == "link" else ["acc", "macro_f1"]
    for m in metrics:
        report.aggregate[m] = weighted_mean([r[m] for r in report.per_dataset.values()], weights)
    report.aggregate["n_test"] = int(sum(weights))
    return report


def evaluate(checkpoint, datasets: list[GraphDataset], task: str = "link", mode: str = "zero_shot",
             k: int = TOP_K, exclude_train: bool = True) -> EvalReport:
    """Evaluate a :class:`~anygraph.checkpoint.Checkpoint` on ``datasets``.

    Zero-shot mode refuses any dataset that appears in the checkpoint's
    training roster.
    """
    if mode not in ("zero_shot", "full_shot"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "zero_shot":
        seen = sorted(set(checkpoint.roster) & {g.name for g in datasets})
        if seen:
            raise ContaminationError(f"zero-shot evaluation on training datasets: {seen}")
    cfg = checkpoint.config.resolved()
    return evaluate_model(
        checkpoint.model(), checkpoint.router(), cfg.embed, cfg.train.seed,
        datasets, task, mode, k, exclude_train,
    )
