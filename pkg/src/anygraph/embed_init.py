"""Unified initial node embeddings.

Adjacency and features of any size are mapped to ``d`` columns through
truncated SVD, combined with the feature block column-reversed, row
normalized, then smoothed with a parameter-free multi-hop propagation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graph_store import GraphDataset, NormalizedAdjacency, read_matrix, write_matrix
from .sparse_linalg import LAYERNORM_EPS, row_layernorm, rng_stream, spmm, truncated_svd

log = logging.getLogger(__name__)

__all__ = [
    "EmbedConfig",
    "InitialEmbedding",
    "EmbeddingCache",
    "flip_columns",
    "pad_to_dim",
    "build_e0",
    "build_e1",
    "initial_embedding",
    "reproject",
    "svd_stream_tag",
]


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 512
    hops: int = 2
    power_iters: int = 2
    oversample: int = 8
    use_features: bool = True
    self_loops: bool = True
    center_features: bool = False

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("embedding dim must be >= 1")
        if self.hops < 1:
            raise ValueError("hops must be >= 1")


@dataclass(frozen=True, eq=False)
class InitialEmbedding:
    e1: np.ndarray
    dataset: str
    aug_epoch: int
    dim: int
    hops: int


def svd_stream_tag(dataset: str, aug_epoch: int) -> str:
    return f"dataset:{dataset}:svd:{aug_epoch}"


def flip_columns(x: np.ndarray) -> np.ndarray:
    """Reverse column order: column j goes to d-1-j."""
    return np.asarray(x)[:, ::-1].copy()


def pad_to_dim(u: np.ndarray, s: np.ndarray, d: int) -> np.ndarray:
    """``u * sqrt(s)`` widened with zero columns to ``d``."""
    u = np.asarray(u, dtype=np.float64)
    r = u.shape[1]
    if r > d:
        raise ValueError(f"rank {r} exceeds target dimension {d}")
    out = np.zeros((u.shape[0], d))
    out[:, :r] = u * np.sqrt(np.asarray(s, dtype=np.float64))
    return out


def build_e0(
    g: GraphDataset,
    adj: NormalizedAdjacency,
    cfg: EmbedConfig,
    seed: int,
    aug_epoch: int = 0,
) -> np.ndarray:
    d = cfg.dim
    tag = svd_stream_tag(g.name, aug_epoch)

    rank_a = min(d, adj.num_nodes)
    fa = truncated_svd(
        adj.matrix, rank_a, cfg.power_iters, cfg.oversample, seed=rng_stream(seed, tag)
    )
    total = pad_to_dim(fa.U, fa.S, d) + pad_to_dim(fa.V, fa.S, d)

    if cfg.use_features and g.features is not None:
        feats = np.asarray(g.features, dtype=np.float64)
        if cfg.center_features:
            feats = feats - feats.mean(axis=0, keepdims=True)
        rank_f = min(d, *feats.shape)
        ff = truncated_svd(
            feats, rank_f, cfg.power_iters, cfg.oversample,
            seed=rng_stream(seed, tag + ":features"),
        )
        # right factor of the feature SVD is not needed
        total += flip_columns(pad_to_dim(ff.U, ff.S, d))
    return row_layernorm(total, LAYERNORM_EPS)


def build_e1(e0: np.ndarray, adj: NormalizedAdjacency, hops: int) -> np.ndarray:
    """Sum of propagated embeddings for hops 1..L (the raw input is not included)."""
    if hops < 1:
        raise ValueError("hops must be >= 1")
    x = np.asarray(e0, dtype=np.float64)
    acc = np.zeros_like(x)
    for _ in range(hops):
        x = spmm(adj, x)
        acc += x
    return acc


def initial_embedding(
    g: GraphDataset,
    adj: NormalizedAdjacency,
    cfg: EmbedConfig,
    seed: int,
    aug_epoch: int = 0,
) -> InitialEmbedding:
    e0 = build_e0(g, adj, cfg, seed, aug_epoch)
    e1 = build_e1(e0, adj, cfg.hops)
    e1.setflags(write=False)
    return InitialEmbedding(e1=e1, dataset=g.name, aug_epoch=aug_epoch, dim=cfg.dim, hops=cfg.hops)


def reproject(
    g: GraphDataset,
    adj: NormalizedAdjacency,
    cfg: EmbedConfig,
    aug_epoch: int,
    seed: int,
) -> InitialEmbedding:
    """Recompute the embedding space with the SVD stream of ``aug_epoch``."""
    if aug_epoch < 1:
        raise ValueError("reprojection epochs start at 1")
    return initial_embedding(g, adj, cfg, seed, aug_epoch)


def _fingerprint(g: GraphDataset) -> str:
    h = hashlib.sha256()
    h.update(str(g.num_nodes).encode())
    h.update(np.ascontiguousarray(g.train_edges, dtype="<i8").tobytes())
    if g.features is not None:
        h.update(np.ascontiguousarray(g.features, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


class EmbeddingCache:
    """On-disk E1 store: binary matrix plus a JSON sidecar.

    Values are stored as float32; :meth:`get` always returns the value as read
    back from disk so hits and misses are numerically identical.
    """

    def __init__(self, directory: str | Path | None = None) -> None:
        directory = directory or os.environ.get("ANYGRAPH_CACHE_DIR") or ".anygraph_cache"
        self.directory = Path(directory)

    def _meta(self, g: GraphDataset, cfg: EmbedConfig, seed: int, aug_epoch: int) -> dict:
        return {
            "dataset": g.name,
            "dim": cfg.dim,
            "hops": cfg.hops,
            "aug_epoch": aug_epoch,
            "seed": seed,
            "flags": asdict(cfg),
            "fingerprint": _fingerprint(g),
        }

    def paths(self, g: GraphDataset, cfg: EmbedConfig, seed: int, aug_epoch: int):
        meta = self._meta(g, cfg, seed, aug_epoch)
        key = hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()[:12]
        stem = f"{g.name.replace('/', '_')}.e{aug_epoch}.{key}"
        return self.directory / f"{stem}.bin", self.directory / f"{stem}.json", meta

    def lookup(self, g: GraphDataset, cfg: EmbedConfig, seed: int, aug_epoch: int = 0):
        bin_path, meta_path, meta = self.paths(g, cfg, seed, aug_epoch)
        if not (bin_path.exists() and meta_path.exists()):
            return None
        try:
            stored = json.loads(meta_path.read_text(encoding="utf-8"))
            e1 = read_matrix(bin_path)
        except (OSError, ValueError):
            return None
        if stored != meta or e1.shape != (g.num_nodes, cfg.dim):
            return None
        e1.setflags(write=False)
        return InitialEmbedding(e1=e1, dataset=g.name, aug_epoch=aug_epoch, dim=cfg.dim, hops=cfg.hops)

    def get(
        self,
        g: GraphDataset,
        adj: NormalizedAdjacency,
        cfg: EmbedConfig,
        seed: int,
        aug_epoch: int = 0,
    ) -> tuple[InitialEmbedding, bool]:
        """Return ``(embedding, hit)``."""
        hit = self.lookup(g, cfg, seed, aug_epoch)
        if hit is not None:
            return hit, True
        emb = initial_embedding(g, adj, cfg, seed, aug_epoch)
        bin_path, meta_path, meta = self.paths(g, cfg, seed, aug_epoch)
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = bin_path.with_suffix(".bin.tmp")
        write_matrix(tmp, emb.e1)
        os.replace(tmp, bin_path)
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        log.debug("cached E1 for %s (aug_epoch=%d) at %s", g.name, aug_epoch, bin_path)
        return self.lookup(g, cfg, seed, aug_epoch), False
