"""Learnable token embeddings with a mask row, random dropping and an EMA copy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, default_dtype, embedding_lookup
from .errors import ContractError


@dataclass
class Codebook:
    """Embedding table of shape ``(K + 1, D)``; row ``K`` is the mask token."""

    K: int
    D: int
    table: Tensor
    ema_table: np.ndarray

    def __post_init__(self):
        if self.table.shape != (self.K + 1, self.D) or self.ema_table.shape != self.table.shape:
            raise ContractError(
                f"codebook tables must be {(self.K + 1, self.D)}, got "
                f"{self.table.shape} and {self.ema_table.shape}"
            )

    @property
    def mask_id(self) -> int:
        return self.K


@dataclass(frozen=True)
class DropMask:
    bits: np.ndarray  # 1 = keep, 0 = replaced by the mask token
    rate: float


class CollapseMetrics(NamedTuple):
    mean_norm: float
    mean_pairwise_distance: float
    collapse_ratio: float


def init_gaussian(K: int, D: int, seed: int) -> Codebook:
    """Entries drawn i.i.d. from N(0, std = D**-0.5)."""
    if K < 2:
        raise ContractError(f"codebook needs K >= 2 categories, got {K}")
    if D < 1:
        raise ContractError(f"embedding dimension must be positive, got {D}")
    rng = np.random.default_rng(seed)
    data = (rng.standard_normal((K + 1, D)) * D**-0.5).astype(default_dtype())
    return Codebook(K, D, Tensor(data, requires_grad=True), data.copy())


def embed(cb: Codebook, tokens, use_ema: bool = False) -> Tensor:
    table = Tensor(cb.ema_table) if use_ema else cb.table
    return embedding_lookup(table, tokens)


def random_drop(tokens, rate: float, rng: np.random.Generator, mask_id: int):
    """Replace each position by ``mask_id`` independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"drop rate must lie in [0, 1], got {rate}")
    tokens = np.asarray(tokens)
    keep = rng.random(tokens.shape) >= rate
    dropped = np.where(keep, tokens, mask_id)
    return dropped, DropMask(keep.astype(np.int8), rate)


def ema_update(cb: Codebook, eta: float) -> None:
    """ema <- eta * ema + (1 - eta) * table, outside the autodiff tape."""
    ema_update_array(cb.ema_table, cb.table.data, eta)


def ema_update_array(shadow: np.ndarray, live: np.ndarray, eta: float) -> None:
    if not 0.0 <= eta <= 1.0:
        raise ContractError(f"EMA rate must lie in [0, 1], got {eta}")
    if eta == 1.0:
        return
    if eta == 0.0:
        shadow[...] = live
        return
    shadow *= eta
    shadow += (1.0 - eta) * live


def collapse_metrics(cb: Codebook) -> CollapseMetrics:
    """Norm and spread statistics over the K non-mask rows.

    ``collapse_ratio = mean_pairwise_distance / mean_norm``; small values mean
    the embeddings have converged onto each other.
    """
    return table_collapse_metrics(cb.table.data[: cb.K])


def table_collapse_metrics(rows: np.ndarray) -> CollapseMetrics:
    e = np.asarray(rows, dtype=np.float64)
    k = e.shape[0]
    if k < 2:
        raise ContractError("collapse metrics need at least two rows")
    # explicit differences keep identical rows at exactly zero distance
    total = 0.0
    for i in range(k - 1):
        total += np.linalg.norm(e[i + 1 :] - e[i], axis=1).sum()
    mean_dist = float(total / (k * (k - 1) / 2))
    mean_norm = float(np.linalg.norm(e, axis=1).mean())
    ratio = mean_dist / mean_norm if mean_norm > 0 else 0.0
    return CollapseMetrics(mean_norm, mean_dist, ratio)
