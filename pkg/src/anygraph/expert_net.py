"""Graph experts: residual MLPs with layer normalization, forward and
hand-written backward passes.

Each layer computes ``LayerNorm(Dropout(ReLU(x @ W + b)) + x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sparse_linalg import LAYERNORM_EPS, rng_stream

__all__ = [
    "ModelConfig",
    "ExpertParams",
    "ForwardTrace",
    "MoEModel",
    "init_params",
    "forward",
    "backward",
    "score_pairs",
    "xavier_bound",
]


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 512
    layers: int = 8
    num_experts: int = 8
    affine_layernorm: bool = False

    def __post_init__(self) -> None:
        if self.dim < 1 or self.layers < 1 or self.num_experts < 1:
            raise ValueError("dim, layers and num_experts must all be >= 1")

    @property
    def param_count(self) -> int:
        return self.num_experts * self.layers * (self.dim * self.dim + self.dim)


@dataclass
class ExpertParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    expert_id: int = 0
    gains: list[np.ndarray] | None = None
    shifts: list[np.ndarray] | None = None

    @property
    def dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def affine(self) -> bool:
        return self.gains is not None

    def named(self) -> dict[str, np.ndarray]:
        """Parameter arrays by name (live references, not copies)."""
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
            if self.gains is not None:
                out[f"g{i}"] = self.gains[i]
                out[f"s{i}"] = self.shifts[i]
        return out

    def copy(self) -> "ExpertParams":
        dup = lambda xs: None if xs is None else [x.copy() for x in xs]  # noqa: E731
        return ExpertParams(
            weights=dup(self.weights),
            biases=dup(self.biases),
            expert_id=self.expert_id,
            gains=dup(self.gains),
            shifts=dup(self.shifts),
        )


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(d: int, layers: int, expert_id: int, seed: int, affine: bool = False) -> ExpertParams:
    """Xavier-uniform weights, zero biases; one RNG stream per (expert, layer)."""
    if d < 1 or layers < 1:
        raise ValueError("d and layers must be >= 1")
    bound = xavier_bound(d, d)
    weights = [
        rng_stream(seed, f"expert:{expert_id}:layer:{i}").uniform(-bound, bound, size=(d, d))
        for i in range(layers)
    ]
    biases = [np.zeros(d) for _ in range(layers)]
    gains = [np.ones(d) for _ in range(layers)] if affine else None
    shifts = [np.zeros(d) for _ in range(layers)] if affine else None
    return ExpertParams(weights, biases, expert_id, gains, shifts)


@dataclass
class _LayerCache:
    inp: np.ndarray
    pre: np.ndarray
    mask: np.ndarray | None
    xhat: np.ndarray
    rstd: np.ndarray


@dataclass
class ForwardTrace:
    params: ExpertParams
    x: np.ndarray
    layers: list[_LayerCache] = field(default_factory=list)


def forward(
    p: ExpertParams,
    x: np.ndarray,
    train: bool = False,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    eps: float = LAYERNORM_EPS,
) -> tuple[np.ndarray, ForwardTrace | None]:
    """Run the expert on rows of ``x``.

    In training mode a :class:`ForwardTrace` is returned for :func:`backward`
    and inverted dropout is applied; eval mode returns ``(out, None)``.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != p.dim:
        raise ValueError(f"expected input of shape (rows, {p.dim}), got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("expert input contains non-finite values")
    use_dropout = train and dropout_p > 0.0
    if use_dropout and rng is None:
        raise ValueError("training-mode dropout needs an rng")
    trace = ForwardTrace(params=p, x=h) if train else None

    for i in range(p.num_layers):
        pre = h @ p.weights[i] + p.biases[i]
        act = np.maximum(pre, 0.0)
        mask = None
        if use_dropout:
            mask = (rng.random(act.shape) >= dropout_p) / (1.0 - dropout_p)
            act = act * mask
        z = act + h
        centered = z - z.mean(axis=1, keepdims=True)
        rstd = 1.0 / np.sqrt(np.mean(centered * centered, axis=1, keepdims=True) + eps)
        xhat = centered * rstd
        out = xhat * p.gains[i] + p.shifts[i] if p.affine else xhat
        if trace is not None:
            trace.layers.append(_LayerCache(inp=h, pre=pre, mask=mask, xhat=xhat, rstd=rstd))
        h = out
    return h, trace


def backward(trace: ForwardTrace, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter and the input rows."""
    p = trace.params
    dy = np.asarray(grad_out, dtype=np.float64)
    if dy.shape != trace.x.shape:
        raise ValueError(f"grad shape {dy.shape} does not match forward output {trace.x.shape}")
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(p.num_layers)):
        c = trace.layers[i]
        if p.affine:
            grads[f"g{i}"] = np.sum(dy * c.xhat, axis=0)
            grads[f"s{i}"] = np.sum(dy, axis=0)
            dy = dy * p.gains[i]
        dz = c.rstd * (
            dy
            - dy.mean(axis=1, keepdims=True)
            - c.xhat * np.mean(dy * c.xhat, axis=1, keepdims=True)
        )
        dact = dz if c.mask is None else dz * c.mask
        dpre = np.where(c.pre > 0.0, dact, 0.0)
        grads[f"W{i}"] = c.inp.T @ dpre
        grads[f"b{i}"] = dpre.sum(axis=0)
        dy = dz + dpre @ p.weights[i].T
    return grads, dy


def score_pairs(emb: np.ndarray, pairs) -> np.ndarray:
    """Dot-product link scores for each ``(i, j)`` in ``pairs``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = emb.shape[0]
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise IndexError(f"pair index out of range for {n} embeddings")
    return np.einsum("ij,ij->i", emb[pairs[:, 0]], emb[pairs[:, 1]])


class MoEModel:
    """K independent experts sharing one configuration."""

    def __init__(self, config: ModelConfig, experts: list[ExpertParams]) -> None:
        if len(experts) != config.num_experts:
            raise ValueError("expert count does not match config")
        self.config = config
        self.experts = experts

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "MoEModel":
        experts = [
            init_params(config.dim, config.layers, k, seed, config.affine_layernorm)
            for k in range(config.num_experts)
        ]
        return cls(config, experts)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def embed(self, k: int, x: np.ndarray) -> np.ndarray:
        """Eval-mode output of expert ``k``."""
        out, _ = forward(self.experts[k], x, train=False)
        return out

    def copy(self) -> "MoEModel":
        return MoEModel(self.config, [e.copy() for e in self.experts])
