"""Synthetic token distributions with exactly computable probabilities.

Three families stand in for tokenizer output:

* ``factorized``: independent categorical per position.
* ``markov-grid``: tokens on a ``rows x width`` grid; each token depends on its
  left neighbour (or the token above, for the first column). The dependency
  graph is a tree, so marginals and log-probabilities are exact.
* ``template-mixture``: pick one of J templates, then resample each position
  uniformly with probability ``corruption``. The template index doubles as a
  class label for conditional runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, TokenIndexError

KINDS = ("factorized", "markov-grid", "template-mixture")
MAX_ENUMERATION = 10**6


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str
    M: int
    K: int
    seed: int = 0
    rows: np.ndarray | None = None  # factorized: (M, K)
    width: int = 0  # markov-grid
    init: np.ndarray | None = None  # markov-grid: (K,)
    trans: np.ndarray | None = None  # markov-grid: (K, K), row = parent token
    templates: np.ndarray | None = None  # template-mixture: (J, M)
    weights: np.ndarray | None = None  # template-mixture: (J,)
    corruption: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown synthetic kind {self.kind!r}")
        for name in ("rows", "init", "trans", "weights"):
            arr = getattr(self, name)
            if arr is not None and np.abs(np.asarray(arr).sum(axis=-1) - 1.0).max() > 1e-9:
                raise ContractError(f"{name} rows must sum to 1 within 1e-9")

    @property
    def num_classes(self) -> int:
        return len(self.templates) if self.kind == "template-mixture" else 0

    def parents(self) -> np.ndarray:
        """Parent position for each grid cell (-1 for the root)."""
        idx = np.arange(self.M)
        col = idx % self.width
        return np.where(col > 0, idx - 1, np.where(idx >= self.width, idx - self.width, -1))


# -- constructors -------------------------------------------------------------------------


def factorized(M: int, K: int, seed: int = 0, concentration: float = 0.5, rows=None) -> SyntheticSpec:
    if rows is None:
        rng = np.random.default_rng(seed)
        rows = rng.dirichlet(np.full(K, concentration), size=M)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape != (M, K):
        raise DimensionError(f"factorized rows must be {(M, K)}, got {rows.shape}")
    return SyntheticSpec("factorized", M, K, seed, rows=rows)


def markov_grid(
    M: int,
    K: int,
    width: int,
    seed: int = 0,
    stickiness: float = 0.7,
    concentration: float = 0.5,
    init=None,
    trans=None,
) -> SyntheticSpec:
    if width < 1 or M % width:
        raise ContractError(f"grid width {width} must divide M={M}")
    rng = np.random.default_rng(seed)
    if init is None:
        init = rng.dirichlet(np.full(K, concentration))
    if trans is None:
        trans = stickiness * np.eye(K) + (1.0 - stickiness) * rng.dirichlet(np.full(K, concentration), size=K)
    return SyntheticSpec(
        "markov-grid", M, K, seed, width=width,
        init=np.asarray(init, dtype=np.float64), trans=np.asarray(trans, dtype=np.float64),
    )


def template_mixture(
    M: int, K: int, num_templates: int, corruption: float, seed: int = 0, templates=None, weights=None
) -> SyntheticSpec:
    if not 0.0 <= corruption <= 1.0:
        raise ContractError(f"corruption must lie in [0, 1], got {corruption}")
    rng = np.random.default_rng(seed)
    if templates is None:
        templates = rng.integers(0, K, size=(num_templates, M))
    if weights is None:
        weights = np.full(len(templates), 1.0 / len(templates))
    return SyntheticSpec(
        "template-mixture", M, K, seed,
        templates=np.asarray(templates, dtype=np.int64), weights=np.asarray(weights, dtype=np.float64),
        corruption=float(corruption),
    )


def build(kind: str, M: int, K: int, seed: int = 0, **kw) -> SyntheticSpec:
    if kind == "factorized":
        return factorized(M, K, seed, **kw)
    if kind == "markov-grid":
        return markov_grid(M, K, seed=seed, **kw)
    if kind == "template-mixture":
        return template_mixture(M, K, seed=seed, **kw)
    raise ContractError(f"unknown synthetic kind {kind!r}")


# -- sampling ----------------------------------------------------------------------------


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((cdf < u).sum(axis=-1), probs.shape[-1] - 1)


def gen_labeled_batch(spec: SyntheticSpec, batch: int, rng: np.random.Generator):
    """``(tokens, labels)``; labels are template ids, or None for unlabeled kinds."""
    if spec.kind == "factorized":
        return _categorical(np.broadcast_to(spec.rows, (batch, spec.M, spec.K)), rng), None
    if spec.kind == "markov-grid":
        out = np.empty((batch, spec.M), dtype=np.int64)
        par = spec.parents()
        for i in range(spec.M):
            probs = np.broadcast_to(spec.init, (batch, spec.K)) if par[i] < 0 else spec.trans[out[:, par[i]]]
            out[:, i] = _categorical(probs, rng)
        return out, None
    labels = _categorical(np.broadcast_to(spec.weights, (batch, len(spec.weights))), rng)
    tokens = spec.templates[labels].copy()
    noise = rng.random((batch, spec.M)) < spec.corruption
    tokens[noise] = rng.integers(0, spec.K, size=int(noise.sum()))
    return tokens, labels


def gen_batch(spec: SyntheticSpec, batch: int, rng: np.random.Generator) -> np.ndarray:
    return gen_labeled_batch(spec, batch, rng)[0]


class SyntheticDataset:
    """Deterministic batches: the batch for step k depends only on (seed, k)."""

    def __init__(self, spec: SyntheticSpec, batch: int, seed: int = 0, conditional: bool = False):
        self.spec = spec
        self.batch_size = batch
        self.seed = seed
        self.conditional = conditional

    def batch(self, step: int):
        rng = np.random.default_rng([self.seed, step])
        tokens, labels = gen_labeled_batch(self.spec, self.batch_size, rng)
        return tokens, (labels if self.conditional else None)


# -- exact probabilities --------------------------------------------------------------------


def _check_tokens(spec: SyntheticSpec, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.shape[-1] != spec.M:
        raise DimensionError(f"expected sequences of length {spec.M}, got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= spec.K):
        raise TokenIndexError(f"tokens must lie in [0, {spec.K - 1}]")
    return tokens


def true_logprob(spec: SyntheticSpec, tokens):
    """Exact log-probability; ``-inf`` for impossible sequences. Accepts (M,) or (n, M)."""
    tokens = _check_tokens(spec, tokens)
    single = tokens.ndim == 1
    x = np.atleast_2d(tokens)
    pos = np.arange(spec.M)
    with np.errstate(divide="ignore"):
        if spec.kind == "factorized":
            lp = np.log(spec.rows[pos, x]).sum(axis=1)
        elif spec.kind == "markov-grid":
            par = spec.parents()
            lp = np.log(spec.init[x[:, 0]])
            for i in range(1, spec.M):
                lp = lp + np.log(spec.trans[x[:, par[i]], x[:, i]])
        else:
            r, K = spec.corruption, spec.K
            match = x[:, None, :] == spec.templates[None, :, :]  # (n, J, M)
            per_tok = np.where(match, (1.0 - r) + r / K, r / K)
            comp = np.log(per_tok).sum(axis=2) + np.log(spec.weights)  # (n, J)
            top = comp.max(axis=1, keepdims=True)
            safe = np.where(np.isfinite(top), top, 0.0)
            lp = (safe + np.log(np.exp(comp - safe).sum(axis=1, keepdims=True)))[:, 0]
    return float(lp[0]) if single else lp


def marginals(spec: SyntheticSpec) -> np.ndarray:
    """Exact per-position marginals, shape ``(M, K)``."""
    if spec.kind == "factorized":
        return spec.rows.copy()
    if spec.kind == "markov-grid":
        par = spec.parents()
        out = np.empty((spec.M, spec.K))
        out[0] = spec.init
        for i in range(1, spec.M):
            out[i] = out[par[i]] @ spec.trans
        return out
    r, K = spec.corruption, spec.K
    onehot = np.eye(K)[spec.templates]  # (J, M, K)
    return np.einsum("j,jmk->mk", spec.weights, (1.0 - r) * onehot + r / K)


def enumerable(spec: SyntheticSpec) -> bool:
    return spec.K**spec.M <= MAX_ENUMERATION


def all_sequences(K: int, M: int) -> np.ndarray:
    codes = np.arange(K**M)
    return (codes[:, None] // K ** np.arange(M - 1, -1, -1)[None, :]) % K


def encode(tokens: np.ndarray, K: int) -> np.ndarray:
    """Base-K integer code of each sequence (matches ``all_sequences`` ordering)."""
    tokens = np.atleast_2d(tokens)
    M = tokens.shape[1]
    return tokens @ (K ** np.arange(M - 1, -1, -1))


def joint_probs(spec: SyntheticSpec) -> np.ndarray:
    if not enumerable(spec):
        raise ContractError(f"K^M = {spec.K}^{spec.M} exceeds the enumeration limit")
    return np.exp(true_logprob(spec, all_sequences(spec.K, spec.M)))


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch: {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ContractError("tv_distance inputs must each sum to 1 within 1e-6")
    return float(0.5 * np.abs(p - q).sum())
