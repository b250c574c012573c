"""Score pooling: collapse the scores of all paths between an entity pair
into one probability.

Four strategies are supported: ``max``, ``top_k`` (mean of the k best),
``average`` and ``logsumexp``. Every strategy returns per-path gradient
weights so the backward pass is just ``upstream * weights``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import sigmoid

DEFAULT_TOP_K = 5


class NoPathsError(ValueError):
    pass


@dataclass(frozen=True)
class PoolingKind:
    name: str
    k: int = 1

    def __post_init__(self):
        if self.name not in ("max", "top_k", "average", "logsumexp"):
            raise ValueError(f"unknown pooling {self.name!r}")
        if self.name == "top_k" and self.k < 1:
            raise ValueError("top_k needs k >= 1")

    @classmethod
    def parse(cls, text: str) -> "PoolingKind":
        """Parse a CLI spelling: ``max``, ``topk:K``, ``avg`` or ``lse``."""
        t = text.strip().lower()
        if t == "max":
            return MAX
        if t in ("avg", "average", "mean"):
            return AVERAGE
        if t in ("lse", "logsumexp"):
            return LSE
        if t.startswith("topk"):
            _, _, k = t.partition(":")
            return cls("top_k", int(k) if k else DEFAULT_TOP_K)
        raise ValueError(f"unknown pooling {text!r}; expected max|topk:K|avg|lse")

    def __str__(self) -> str:
        return {"max": "max", "average": "avg", "logsumexp": "lse"}.get(self.name, f"topk:{self.k}")


MAX = PoolingKind("max")
AVERAGE = PoolingKind("average")
LSE = PoolingKind("logsumexp")


def top_k(k: int = DEFAULT_TOP_K) -> PoolingKind:
    return PoolingKind("top_k", k)


@dataclass
class PoolResult:
    probability: float
    pooled: float
    weights: np.ndarray


def _top_indices(s: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -s: equal scores keep ascending index order
    return np.argsort(-s, kind="stable")[:k]


def pool(scores, kind: PoolingKind) -> PoolResult:
    s = np.asarray(scores, dtype=np.float64).ravel()
    n = s.shape[0]
    if n == 0:
        raise NoPathsError("entity pair has no paths")
    if not np.all(np.isfinite(s)):
        raise ValueError("pool: scores must be finite")

    weights = np.zeros(n)
    if kind.name in ("max", "top_k"):
        k = 1 if kind.name == "max" else min(kind.k, n)
        idx = _top_indices(s, k)
        pooled = float(s[idx].sum() / k) if k > 1 else float(s[idx[0]])
        weights[idx] = 1.0 / k
    elif kind.name == "average":
        pooled = float(s.sum() / n)
        weights[:] = 1.0 / n
    else:
        c = float(s.max())
        e = np.exp(s - c)
        z = float(e.sum())
        pooled = c + math.log(z)
        weights = e / z
    return PoolResult(sigmoid(pooled), pooled, weights)


def pool_backward(scores, kind: PoolingKind, upstream_grad: float) -> np.ndarray:
    """d(loss)/d(score_i) given d(loss)/d(pooled score)."""
    return upstream_grad * pool(scores, kind).weights
