"""Semantic matching: queries, keys, attention scores, pruned matching matrix.

Index convention throughout: entry ``(i, j)`` of a score or weight matrix
scores *source* ``j`` for *destination* ``i``.  Destination ``i`` multicasts
its query; source ``j`` scores the received copy against its own key, and
``j`` later unicasts its feature to ``i`` if the pruned weight survives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .mathcore import (
    DenseParams, Var, as_var, einsum, glorot_params, mlp_forward, mul, scale, softmax,
    softmax_row,
)

__all__ = [
    "CommModules",
    "MatchingMatrix",
    "gen_query",
    "gen_key",
    "match_score",
    "match_scores",
    "build_matrix",
    "prune",
    "prune_weights",
    "combine",
    "combine_batch",
    "count_connections",
]


@dataclass
class CommModules:
    """The only trainable parameters: query net, key net and the Q x K bilinear map."""

    query: DenseParams
    key: DenseParams
    wa: np.ndarray

    @classmethod
    def build(cls, in_dim: int, hidden=(256, 128), query_size: int = 64,
              key_size: int = 1024, seed: int = 0) -> "CommModules":
        rng = np.random.default_rng([seed, 0xC0])
        q = glorot_params([in_dim, *hidden, query_size], rng)
        k = glorot_params([in_dim, *hidden, key_size], rng)
        limit = math.sqrt(6.0 / (query_size + key_size))
        wa = rng.uniform(-limit, limit, size=(query_size, key_size))
        return cls(q, k, wa)

    @property
    def in_dim(self) -> int:
        return self.query.sizes[0]

    @property
    def query_size(self) -> int:
        return self.query.sizes[-1]

    @property
    def key_size(self) -> int:
        return self.key.sizes[-1]

    def named_arrays(self) -> dict:
        out = self.query.named_arrays("query.")
        out.update(self.key.named_arrays("key."))
        out["wa"] = self.wa
        return out

    def with_arrays(self, arrays: dict) -> "CommModules":
        return CommModules(
            self.query.with_arrays(arrays, "query."),
            self.key.with_arrays(arrays, "key."),
            arrays["wa"],
        )

    def copy(self) -> "CommModules":
        return self.with_arrays({k: np.array(v, copy=True) for k, v in self.named_arrays().items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(as_var(a).value)) for a in self.named_arrays().values())


def gen_query(o, modules: CommModules):
    return mlp_forward(modules.query, o)


def gen_key(o, modules: CommModules):
    return mlp_forward(modules.key, o)


def match_score(kappa, q_hat, wa) -> float:
    """Scaled general attention ``q_hat . (Wa kappa) / sqrt(K)``."""
    kappa = np.asarray(kappa, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    wa = np.asarray(wa, dtype=np.float64)
    if wa.shape != (q_hat.size, kappa.size) or kappa.ndim != 1 or q_hat.ndim != 1:
        raise ShapeError(f"Wa {wa.shape} does not pair query {q_hat.shape} with key {kappa.shape}")
    return float(q_hat @ wa @ kappa) / math.sqrt(kappa.size)


def match_scores(q_hat, kappa, wa) -> Var:
    """Batched scores.

    q_hat: (B, N, N, Q), copy of destination i's query as received by source j.
    kappa: (B, N, K), keys held by each source.
    Returns (B, N, N) scores, entry (b, i, j).
    """
    kappa = as_var(kappa)
    proj = einsum("bjk,qk->bjq", kappa, wa)
    return scale(einsum("bijq,bjq->bij", q_hat, proj), 1.0 / math.sqrt(kappa.shape[-1]))


@dataclass(frozen=True)
class MatchingMatrix:
    scores: np.ndarray
    weights: np.ndarray
    pruned: np.ndarray
    rho: float = 0.0


def build_matrix(scores) -> MatchingMatrix:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"score matrix must be square, got {scores.shape}")
    weights = np.stack([softmax_row(row) for row in scores])
    return MatchingMatrix(scores, weights, weights.copy(), 0.0)


def prune(matrix: MatchingMatrix, rho: float) -> MatchingMatrix:
    """Zero every weight below ``rho``; survivors are not renormalised."""
    if rho < 0:
        raise DomainError(f"pruning threshold must be >= 0, got {rho}")
    pruned = np.where(matrix.weights >= rho, matrix.weights, 0.0)
    return MatchingMatrix(matrix.scores, matrix.weights, pruned, float(rho))


def prune_weights(scores: Var, rho: float) -> tuple[Var, np.ndarray]:
    """Row softmax then threshold, differentiable through the survivors.

    Returns the pruned weights and the boolean survival mask.
    """
    weights = softmax(scores, axis=-1)
    keep = weights.value >= rho
    return mul(weights, keep.astype(np.float64)), keep


def combine(weights, received, local, self_index: int) -> np.ndarray:
    """Weighted sum of received features; the self term uses the local feature."""
    weights = np.asarray(weights, dtype=np.float64)
    received = np.array(received, dtype=np.float64)
    local = np.asarray(local, dtype=np.float64)
    if received.ndim != 2 or received.shape[0] != weights.size:
        raise ShapeError(f"need one received feature per weight, got {received.shape}")
    if local.shape != received.shape[1:]:
        raise ShapeError(f"local feature {local.shape} vs received {received.shape[1:]}")
    received[self_index] = local
    return weights @ received


def combine_batch(weights, received) -> Var:
    """weights (B, N, N) x received (B, N, N, d) -> fused (B, N, d)."""
    return einsum("bij,bijd->bid", weights, received)


def count_connections(pruned) -> float:
    """Average number of off-diagonal surviving links per device."""
    pruned = np.asarray(pruned.pruned if isinstance(pruned, MatchingMatrix) else pruned)
    n = pruned.shape[-1]
    off = ~np.eye(n, dtype=bool)
    return float(np.count_nonzero((pruned > 0) & off)) / n
