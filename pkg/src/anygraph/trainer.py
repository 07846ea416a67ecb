"""Multi-dataset training loop.

Batches from all training graphs are shuffled together; each batch comes
from a single graph and updates only the expert that graph is routed to.
Every dataset periodically re-derives its initial embedding (a fresh SVD
draw), and once all datasets have done so the routing table is rebuilt.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Callable

import numpy as np

from .config import RunConfig
from .embed_init import EmbeddingCache, InitialEmbedding, initial_embedding
from .expert_net import ExpertParams, MoEModel, backward, forward
from .graph_store import GraphDataset, NormalizedAdjacency, normalize_adjacency
from .moe_router import RouterState, record_step, reroute_all, route
from .sparse_linalg import rng_stream

log = logging.getLogger(__name__)

__all__ = [
    "EdgeBatch",
    "AdamState",
    "StepRecord",
    "Trainer",
    "build_schedule",
    "sample_negatives",
    "loss_and_grad",
    "adam_step",
    "reprojection_interval",
    "softmax_loss",
    "TrainingDivergedError",
]


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class EdgeBatch:
    dataset: str
    pos: np.ndarray
    expert: int | None = None


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class StepRecord:
    step: int
    dataset: str
    expert: int
    loss: float


def build_schedule(
    datasets: list[GraphDataset], batch_size: int, epoch: int, seed: int
) -> list[EdgeBatch]:
    """One epoch of batches: ceil(|E_train| / B) slots per dataset, globally shuffled.

    Within a dataset the train edges are permuted (and randomly oriented) so
    every edge appears exactly once per epoch.
    """
    if not datasets:
        raise ValueError("no datasets to schedule")
    slots: list[EdgeBatch] = []
    for g in datasets:
        train = g.train_edges
        if len(train) == 0:
            raise ValueError(f"{g.name}: no train edges")
        rng = rng_stream(seed, f"dataset:{g.name}:perm:{epoch}")
        pairs = train[rng.permutation(len(train))].copy()
        flip = rng.random(len(pairs)) < 0.5
        pairs[flip] = pairs[flip, ::-1]
        for start in range(0, len(pairs), batch_size):
            slots.append(EdgeBatch(dataset=g.name, pos=pairs[start:start + batch_size]))
    order = rng_stream(seed, f"schedule:{epoch}").permutation(len(slots))
    return [slots[i] for i in order]


def sample_negatives(num_nodes: int, batch: int, num_neg: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, num_nodes, size=(batch, num_neg))


def _log_softmax_rows(shifted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # shifted already has the batch max removed; the per-row max only guards
    # against whole rows underflowing when rows differ by hundreds of units
    row_max = shifted.max(axis=1, keepdims=True)
    expd = np.exp(shifted - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    lse = np.log(denom) + row_max
    return lse[:, 0], expd / denom


def softmax_loss(scores: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Batch-mean of ``log sum_j exp(s_bj) - s_b,target_b`` with the batch max subtracted.

    Returns the loss and the row-wise softmax probabilities.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (scores.shape[0],))
    shifted = scores - scores.max()
    lse, prob = _log_softmax_rows(shifted)
    loss = float(np.mean(lse - shifted[np.arange(scores.shape[0]), target]))
    return loss, prob


def loss_and_grad(
    emb: np.ndarray, pos: np.ndarray, negatives: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Subtract-max softmax link loss and its gradient w.r.t. ``emb``.

    ``pos`` holds B (anchor, positive) row indices into ``emb``. Without
    ``negatives`` the denominator runs over every row of ``emb``; otherwise
    row b of ``negatives`` gives the sampled partners and the denominator is
    the positive plus those samples. Loss is the mean over the batch.
    """
    emb = np.asarray(emb, dtype=np.float64)
    if not np.all(np.isfinite(emb)):
        raise ValueError("non-finite embedding passed to the loss")
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 2)
    b = len(pos)
    anchors = emb[pos[:, 0]]
    grad = np.zeros_like(emb)

    if negatives is None:
        loss, g = softmax_loss(anchors @ emb.T, pos[:, 1])
        g[np.arange(b), pos[:, 1]] -= 1.0
        g /= b
        grad += g.T @ anchors
        np.add.at(grad, pos[:, 0], g @ emb)
        return loss, grad

    negatives = np.asarray(negatives, dtype=np.int64).reshape(b, -1)
    cand = np.concatenate([pos[:, 1:2], negatives], axis=1)
    partner = emb[cand]
    loss, g = softmax_loss(np.einsum("bd,bcd->bc", anchors, partner), 0)
    g[:, 0] -= 1.0
    g /= b
    np.add.at(grad, pos[:, 0], np.einsum("bc,bcd->bd", g, partner))
    np.add.at(grad, cand.ravel(), (g[:, :, None] * anchors[:, None, :]).reshape(-1, emb.shape[1]))
    return loss, grad


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place."""
    beta1, beta2 = betas
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def reprojection_interval(num_train_edges: int, batch_size: int, fraction: int = 10) -> int:
    """Steps between re-projections: one per 1/fraction of the dataset's edges."""
    return max(1, math.ceil(num_train_edges / (fraction * batch_size)))


@dataclass
class _DatasetState:
    graph: GraphDataset
    adj: NormalizedAdjacency
    e1: InitialEmbedding
    steps: int = 0
    since_reproject: int = 0


class Trainer:
    """Owns the model, router, optimizer state and per-dataset schedule.

    All randomness comes from streams tagged with the global step, epoch or
    augmentation epoch, so a run restored from a checkpoint continues
    exactly as the uninterrupted run would.
    """

    def __init__(
        self,
        datasets: list[GraphDataset],
        config: RunConfig,
        model: MoEModel | None = None,
        cache: EmbeddingCache | None = None,
        log_stream: IO[str] | None = None,
        _route: bool = True,
    ) -> None:
        if not datasets:
            raise ValueError("trainer needs at least one dataset")
        names = [g.name for g in datasets]
        if len(set(names)) != len(names):
            raise ValueError("dataset names must be unique")
        self.config = config.resolved()
        cfg = self.config
        self.seed = cfg.train.seed
        self.cache = cache
        self.log_stream = log_stream
        self.model = model if model is not None else MoEModel.initialize(cfg.model, self.seed)
        if self.model.config.dim != cfg.model.dim or self.model.num_experts != cfg.model.num_experts:
            raise ValueError("model shape does not match the run config")
        self.router = RouterState(
            num_experts=self.model.num_experts,
            rho=cfg.train.rho,
            sample_size=cfg.train.route_sample_size,
        )
        self.adam = [AdamState() for _ in range(self.model.num_experts)]
        self.step_count = 0
        self.epoch = 0
        self.cursor = 0
        self.reprojected: set[str] = set()
        self.history: list[StepRecord] = []
        self._schedule: list[EdgeBatch] | None = None
        self._states: dict[str, _DatasetState] = {}
        for g in datasets:
            adj = normalize_adjacency(g, cfg.embed.self_loops)
            self._states[g.name] = _DatasetState(g, adj, self._embed(g, adj, 0))
        if _route:
            for st in self._states.values():
                route(self.model, st.e1, st.graph, self.router, self.seed)

    # -- helpers -------------------------------------------------------------

    @property
    def datasets(self) -> list[GraphDataset]:
        return [st.graph for st in self._states.values()]

    def embedding(self, name: str) -> InitialEmbedding:
        return self._states[name].e1

    def _embed(self, g: GraphDataset, adj: NormalizedAdjacency, aug_epoch: int) -> InitialEmbedding:
        if self.cache is not None:
            emb, _ = self.cache.get(g, adj, self.config.embed, self.seed, aug_epoch)
            return emb
        return initial_embedding(g, adj, self.config.embed, self.seed, aug_epoch)

    def steps_per_epoch(self) -> int:
        b = self.config.train.batch_size
        return sum(math.ceil(len(st.graph.train_edges) / b) for st in self._states.values())

    def total_steps(self) -> int:
        t = self.config.train
        return t.max_steps if t.max_steps is not None else t.epochs * self.steps_per_epoch()

    def _next_batch(self) -> EdgeBatch:
        if self._schedule is None:
            self._schedule = build_schedule(
                self.datasets, self.config.train.batch_size, self.epoch, self.seed
            )
        while self.cursor >= len(self._schedule):
            self.epoch += 1
            self.cursor = 0
            self._schedule = build_schedule(
                self.datasets, self.config.train.batch_size, self.epoch, self.seed
            )
        return self._schedule[self.cursor]

    # -- one optimization step ------------------------------------------------

    def batch_loss(self, batch: EdgeBatch, k: int, step: int):
        """Forward expert ``k`` on the rows ``batch`` needs; returns loss, grads."""
        t = self.config.train
        st = self._states[batch.dataset]
        n = st.graph.num_nodes
        if t.neg_mode_for(n) == "full":
            rows = None
            x = st.e1.e1
            pos_local, neg_local = batch.pos, None
        else:
            negs = sample_negatives(
                n, len(batch.pos), t.num_neg, rng_stream(self.seed, f"train:negatives:{step}")
            )
            rows = np.unique(np.concatenate([batch.pos.ravel(), negs.ravel()]))
            x = st.e1.e1[rows]
            pos_local = np.searchsorted(rows, batch.pos)
            neg_local = np.searchsorted(rows, negs)
        out, trace = forward(
            self.model.experts[k], x, train=True, dropout_p=t.dropout_p,
            rng=rng_stream(self.seed, f"train:dropout:{step}"),
        )
        if not np.all(np.isfinite(out)):
            return float("nan"), None
        loss, grad_emb = loss_and_grad(out, pos_local, neg_local)
        grads, _ = backward(trace, grad_emb)
        return loss, grads

    def step(self) -> StepRecord:
        t = self.config.train
        batch = self._next_batch()
        k = self.router.assignment[batch.dataset]
        batch.expert = k
        loss, grads = self.batch_loss(batch, k, self.step_count)
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step_count} "
                f"(dataset {batch.dataset}, expert {k}, epoch {self.epoch}, slot {self.cursor})"
            )
        adam_step(self.model.experts[k].named(), grads, self.adam[k], t.lr, (t.beta1, t.beta2), t.adam_eps)
        record_step(self.router, k)
        rec = StepRecord(self.step_count, batch.dataset, k, loss)
        self.history.append(rec)
        self.cursor += 1
        self.step_count += 1
        self._after_step(batch.dataset)
        if self.log_stream is not None and t.log_every and self.step_count % t.log_every == 0:
            self.log_stream.write(json.dumps({
                "step": self.step_count,
                "dataset": rec.dataset,
                "expert": k,
                "loss": loss,
                "lr": t.lr,
                "aug_epochs": {name: s.e1.aug_epoch for name, s in self._states.items()},
            }) + "\n")
        return rec

    def _after_step(self, name: str) -> None:
        t = self.config.train
        st = self._states[name]
        st.steps += 1
        st.since_reproject += 1
        if t.aug_off:
            return
        interval = reprojection_interval(len(st.graph.train_edges), t.batch_size, t.reproject_fraction)
        if st.steps >= t.reproject_min_steps and st.since_reproject >= interval:
            st.e1 = self._embed(st.graph, st.adj, st.e1.aug_epoch + 1)
            st.since_reproject = 0
            self.reprojected.add(name)
            log.debug("reprojected %s -> aug_epoch %d", name, st.e1.aug_epoch)
        if len(self.reprojected) == len(self._states):
            reroute_all(
                self.model,
                [(s.graph, s.e1) for s in self._states.values()],
                self.router,
                self.seed,
            )
            self.reprojected.clear()

    def run(
        self,
        max_steps: int | None = None,
        callback: Callable[["Trainer", StepRecord], None] | None = None,
    ) -> list[StepRecord]:
        """Train until ``max_steps`` total steps (default: the config's budget)."""
        target = self.total_steps() if max_steps is None else max_steps
        while self.step_count < target:
            rec = self.step()
            if callback is not None:
                callback(self, rec)
        return self.history

    # -- persistence -----------------------------------------------------------

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        """JSON-able metadata and named arrays describing the full training state."""
        meta = {
            "config": self.config.to_dict(),
            "roster": [st.graph.name for st in self._states.values()],
            "step": self.step_count,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "reprojected": sorted(self.reprojected),
            "router": {
                "num_experts": self.router.num_experts,
                "rho": self.router.rho,
                "sample_size": self.router.sample_size,
                "m": self.router.m.tolist(),
                "assignment": dict(sorted(self.router.assignment.items())),
                "route_epoch": self.router.route_epoch,
            },
            "datasets": {
                name: {
                    "steps": st.steps,
                    "since_reproject": st.since_reproject,
                    "aug_epoch": st.e1.aug_epoch,
                    "neg_mode": self.config.train.neg_mode_for(st.graph.num_nodes),
                }
                for name, st in self._states.items()
            },
            "adam_t": [a.t for a in self.adam],
            "history": [[r.step, r.dataset, r.expert, r.loss] for r in self.history],
        }
        arrays: dict[str, np.ndarray] = {}
        for k, expert in enumerate(self.model.experts):
            for pname, arr in expert.named().items():
                arrays[f"expert{k}/{pname}"] = arr
                if pname in self.adam[k].m:
                    arrays[f"adam{k}/m/{pname}"] = self.adam[k].m[pname]
                    arrays[f"adam{k}/v/{pname}"] = self.adam[k].v[pname]
        for name in sorted(self.router.scores):
            arrays[f"router_scores/{name}"] = self.router.scores[name]
        return meta, arrays

    @classmethod
    def restore(
        cls,
        meta: dict,
        arrays: dict[str, np.ndarray],
        datasets: list[GraphDataset],
        cache: EmbeddingCache | None = None,
        log_stream: IO[str] | None = None,
    ) -> "Trainer":
        """Rebuild a trainer from :meth:`state` output plus the same training datasets."""
        config = RunConfig.from_dict(meta["config"])
        by_name = {g.name: g for g in datasets}
        missing = [n for n in meta["roster"] if n not in by_name]
        if missing:
            raise ValueError(f"checkpoint roster datasets not supplied: {missing}")
        ordered = [by_name[n] for n in meta["roster"]]
        model = model_from_arrays(config, arrays)
        tr = cls(ordered, config, model=model, cache=cache, log_stream=log_stream, _route=False)
        r = meta["router"]
        tr.router = RouterState(
            num_experts=r["num_experts"], rho=r["rho"], sample_size=r["sample_size"],
            m=np.array(r["m"], dtype=np.int64), assignment=dict(r["assignment"]),
            scores={key.split("/", 1)[1]: arr.copy() for key, arr in arrays.items()
                    if key.startswith("router_scores/")},
            route_epoch=r["route_epoch"],
        )
        for k, t in enumerate(meta["adam_t"]):
            tr.adam[k].t = t
            for pname in model.experts[k].named():
                if f"adam{k}/m/{pname}" in arrays:
                    tr.adam[k].m[pname] = arrays[f"adam{k}/m/{pname}"].copy()
                    tr.adam[k].v[pname] = arrays[f"adam{k}/v/{pname}"].copy()
        for name, d in meta["datasets"].items():
            st = tr._states[name]
            st.steps = d["steps"]
            st.since_reproject = d["since_reproject"]
            if d["aug_epoch"] != 0:
                st.e1 = tr._embed(st.graph, st.adj, d["aug_epoch"])
        tr.step_count = meta["step"]
        tr.epoch = meta["epoch"]
        tr.cursor = meta["cursor"]
        tr.reprojected = set(meta["reprojected"])
        tr.history = [StepRecord(*row) for row in meta["history"]]
        return tr


def model_from_arrays(config: RunConfig, arrays: dict[str, np.ndarray]) -> MoEModel:
    mc = config.model
    experts = []
    for k in range(mc.num_experts):
        get = lambda p, i: arrays[f"expert{k}/{p}{i}"].copy()  # noqa: E731
        w = [get("W", i) for i in range(mc.layers)]
        if any(x.shape != (mc.dim, mc.dim) for x in w):
            raise ValueError(f"expert {k} weights do not match model.dim={mc.dim}")
        experts.append(ExpertParams(
            weights=w,
            biases=[get("b", i) for i in range(mc.layers)],
            expert_id=k,
            gains=[get("g", i) for i in range(mc.layers)] if mc.affine_layernorm else None,
            shifts=[get("s", i) for i in range(mc.layers)] if mc.affine_layernorm else None,
        ))
    return MoEModel(mc, experts)
