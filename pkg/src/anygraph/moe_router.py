"""Competence-based expert routing with training-frequency recalibration.

An expert's competence on a graph is the mean sigmoid of the gap between
positive-edge and negative-pair dot products of its output embeddings. Raw
competence is scaled by a factor that favours experts which have consumed a
smaller share of training steps; the graph goes to the argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .embed_init import InitialEmbedding
from .expert_net import MoEModel
from .graph_store import GraphDataset
from .sparse_linalg import rng_stream

__all__ = [
    "RouterState",
    "competence",
    "recalibration_factor",
    "recalibrate",
    "sample_routing_pairs",
    "expert_scores",
    "route",
    "record_step",
    "reroute_all",
]

MAX_NEGATIVE_RETRIES = 100


@dataclass
class RouterState:
    num_experts: int
    rho: float = 0.2
    sample_size: int = 1024
    m: np.ndarray = None
    assignment: dict[str, int] = field(default_factory=dict)
    scores: dict[str, np.ndarray] = field(default_factory=dict)
    route_epoch: int = 0

    def __post_init__(self) -> None:
        if self.num_experts < 1:
            raise ValueError("need at least one expert")
        if not 0.0 <= self.rho <= 2.0:
            raise ValueError(f"rho must be in [0, 2], got {self.rho}")
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if self.m is None:
            self.m = np.zeros(self.num_experts, dtype=np.int64)
        else:
            self.m = np.asarray(self.m, dtype=np.int64).copy()
            if self.m.shape != (self.num_experts,) or np.any(self.m < 0):
                raise ValueError("step counters must be K non-negative integers")

    @property
    def total_steps(self) -> int:
        return int(self.m.sum())

    def shares(self) -> np.ndarray:
        total = self.m.sum()
        if total == 0:
            return np.full(self.num_experts, 1.0 / self.num_experts)
        return self.m / total

    def copy(self) -> "RouterState":
        return RouterState(
            num_experts=self.num_experts,
            rho=self.rho,
            sample_size=self.sample_size,
            m=self.m.copy(),
            assignment=dict(self.assignment),
            scores={k: v.copy() for k, v in self.scores.items()},
            route_epoch=self.route_epoch,
        )


def competence(expert_emb: np.ndarray, pos_pairs: np.ndarray, neg_pairs: np.ndarray) -> float:
    """Mean of sigmoid(e_c.e_p - e_c.e_n) over S (positive, negative) pairs."""
    pos = np.asarray(pos_pairs, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(neg_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pos) == 0:
        raise ValueError("competence needs at least one sample pair")
    if len(pos) != len(neg):
        raise ValueError("positive and negative sample counts differ")
    e = expert_emb
    pos_score = np.einsum("ij,ij->i", e[pos[:, 0]], e[pos[:, 1]])
    neg_score = np.einsum("ij,ij->i", e[neg[:, 0]], e[neg[:, 1]])
    return float(np.mean(expit(pos_score - neg_score)))


def recalibration_factor(m: np.ndarray, rho: float) -> np.ndarray:
    """Per-expert multiplier ``(1 - share) * rho + 1 - rho / 2``.

    Evaluated as ``1 + rho * (1/2 - share)`` so the factor is below 1 exactly
    when the share exceeds one half.
    """
    m = np.asarray(m, dtype=np.float64)
    total = m.sum()
    share = np.full(m.shape, 1.0 / len(m)) if total == 0 else m / total
    return 1.0 + rho * (0.5 - share)


def recalibrate(phi: np.ndarray, m: np.ndarray, rho: float) -> np.ndarray:
    return np.asarray(phi, dtype=np.float64) * recalibration_factor(m, rho)


def _edge_keys(edges: np.ndarray, n: int) -> np.ndarray:
    both = np.concatenate([edges, edges[:, ::-1]])
    return np.unique(both[:, 0] * n + both[:, 1])


def sample_routing_pairs(
    g: GraphDataset, sample_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """``S`` positive train edges and ``S`` negatives sharing their anchors.

    Negative partners are uniform over all nodes and redrawn when they hit
    the anchor or a train edge, at most 100 times.
    """
    train = g.train_edges
    if len(train) == 0:
        raise ValueError(f"{g.name}: no train edges to route on")
    n = g.num_nodes
    s = min(sample_size, len(train))
    idx = rng.choice(len(train), size=s, replace=False)
    pos = train[idx].copy()
    flip = rng.random(s) < 0.5
    pos[flip] = pos[flip, ::-1]

    keys = _edge_keys(train, n)
    anchors = pos[:, 0]
    partners = rng.integers(0, n, size=s)
    for _ in range(MAX_NEGATIVE_RETRIES):
        bad = (partners == anchors) | np.isin(anchors * n + partners, keys, assume_unique=False)
        if not bad.any():
            break
        partners[bad] = rng.integers(0, n, size=int(bad.sum()))
    neg = np.stack([anchors, partners], axis=1)
    return pos, neg


def expert_scores(
    model: MoEModel, e1: InitialEmbedding, pos: np.ndarray, neg: np.ndarray
) -> np.ndarray:
    """Raw competence of every expert on the given sample pairs."""
    rows = np.unique(np.concatenate([pos.ravel(), neg.ravel()]))
    local = np.searchsorted(rows, np.arange(e1.e1.shape[0]))
    lpos, lneg = local[pos], local[neg]
    x = e1.e1[rows]
    return np.array([competence(model.embed(k, x), lpos, lneg) for k in range(model.num_experts)])


def route(
    model: MoEModel,
    e1: InitialEmbedding,
    g: GraphDataset,
    state: RouterState,
    seed: int,
) -> int:
    """Assign ``g`` to the expert with the highest recalibrated competence.

    Ties go to the lowest expert index. Updates ``state.assignment`` and
    ``state.scores`` in place.
    """
    if model.num_experts != state.num_experts:
        raise ValueError("router and model disagree on expert count")
    rng = rng_stream(seed, f"route:{state.route_epoch}:dataset:{g.name}")
    pos, neg = sample_routing_pairs(g, state.sample_size, rng)
    phi = expert_scores(model, e1, pos, neg)
    adjusted = recalibrate(phi, state.m, state.rho)
    k = int(np.argmax(adjusted))
    state.assignment[g.name] = k
    state.scores[g.name] = adjusted
    return k


def record_step(state: RouterState, k: int) -> RouterState:
    if not 0 <= k < state.num_experts:
        raise IndexError(f"expert index {k} out of range [0, {state.num_experts})")
    state.m[k] += 1
    return state


def reroute_all(
    model: MoEModel,
    datasets: list[tuple[GraphDataset, InitialEmbedding]],
    state: RouterState,
    seed: int,
) -> RouterState:
    """Advance the routing epoch and rebuild the assignment table from fresh samples."""
    state.route_epoch += 1
    state.assignment = {}
    for g, e1 in datasets:
        route(model, e1, g, state, seed)
    return state
