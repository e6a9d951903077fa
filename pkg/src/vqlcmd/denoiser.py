"""Bidirectional transformer mapping noisy embeddings to per-token logits.

Time and (optional) class conditioning are merged into one condition vector
that drives every AdaLN layer: ``(1 + a) * LayerNorm(h) + b`` with ``a, b``
a linear projection of the condition.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, NumericError


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 4
    heads: int = 4
    width: int = 128
    D: int = 16
    K: int = 8
    M: int = 16
    num_classes: int = 0  # 0 = unconditional; id ``num_classes`` is the null class
    attn_dropout_rate: float = 0.1
    mlp_ratio: int = 4
    use_pos_emb: bool = True
    zero_init_adaln: bool = True

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractError(f"width {self.width} not divisible by heads {self.heads}")
        for name in ("layers", "heads", "width", "D", "K", "M"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")

    @property
    def null_class(self) -> int:
        return self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": DenoiserConfig(),
    "paper-small": DenoiserConfig(layers=15, heads=8, width=512, D=256, K=1024, M=256),
    "paper-imagenet": DenoiserConfig(
        layers=24, heads=16, width=768, D=256, K=1024, M=256, num_classes=1000
    ),
}


def preset(name: str, **overrides) -> DenoiserConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


# -- fixed features ----------------------------------------------------------------------


def time_embed(t, width: int) -> np.ndarray:
    """Sinusoidal features of ``t``; shape ``(width,)`` for scalar t, else ``(B, width)``."""
    t = np.asarray(t, dtype=np.float64)
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = 1000.0 * t[..., None] * freqs
    feats = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if width % 2:
        feats = np.concatenate([feats, np.zeros(feats.shape[:-1] + (1,))], axis=-1)
    return feats.astype(ad.default_dtype())


@functools.lru_cache(maxsize=16)
def _pos_table(M: int, width: int, dtype) -> np.ndarray:
    table = time_embed(np.arange(M) / 1000.0, width).astype(dtype)
    table.setflags(write=False)
    return table


# -- parameters -------------------------------------------------------------------------


def init_params(cfg: DenoiserConfig, seed: int) -> dict[str, Tensor]:
    """LeCun-normal linear weights, zero biases, zero AdaLN projections (by default)."""
    rng = np.random.default_rng(seed)
    dt = ad.default_dtype()
    W, hidden = cfg.width, cfg.width * cfg.mlp_ratio
    params: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out, zero=False):
        std = 0.0 if zero else fan_in**-0.5
        params[f"{name}.w"] = rng.standard_normal((fan_in, fan_out)) * std
        params[f"{name}.b"] = np.zeros(fan_out)

    linear("in", cfg.D, W)
    linear("time1", W, W)
    linear("time2", W, W)
    if cfg.num_classes > 0:
        params["class.emb"] = rng.standard_normal((cfg.num_classes + 1, W))
    for i in range(cfg.layers):
        linear(f"blk{i}.ada1", W, 2 * W, zero=cfg.zero_init_adaln)
        linear(f"blk{i}.qkv", W, 3 * W)
        linear(f"blk{i}.proj", W, W)
        linear(f"blk{i}.ada2", W, 2 * W, zero=cfg.zero_init_adaln)
        linear(f"blk{i}.fc1", W, hidden)
        linear(f"blk{i}.fc2", hidden, W)
    linear("final.ada", W, 2 * W, zero=cfg.zero_init_adaln)
    linear("out", W, cfg.K)
    return {k: Tensor(v.astype(dt), requires_grad=True) for k, v in params.items()}


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    with ad.no_grad():
        return {k: v.shape for k, v in init_params(cfg, 0).items()}


# -- layers -------------------------------------------------------------------------------


def _linear(x: Tensor, params, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def adaln(h: Tensor, cond: Tensor, proj_w: Tensor, proj_b: Tensor) -> Tensor:
    """``(1 + a) * LayerNorm(h) + b`` with ``[a, b] = cond @ proj_w + proj_b``.

    ``h`` is ``(B, M, W)`` and ``cond`` is ``(B, C)``.
    """
    W = h.shape[-1]
    if proj_w.shape[-1] != 2 * W or cond.shape[-1] != proj_w.shape[0]:
        raise DimensionError(f"adaln projection {proj_w.shape} incompatible with h {h.shape}, cond {cond.shape}")
    ab = cond @ proj_w + proj_b
    B = ab.shape[0]
    a = ab[:, :W].reshape(B, 1, W)
    b = ab[:, W:].reshape(B, 1, W)
    return ad.layer_norm(h) * (a + 1.0) + b


def _attention(h: Tensor, params, i: int, cfg: DenoiserConfig, rng) -> Tensor:
    B, M, W = h.shape
    H = cfg.heads
    dh = W // H
    qkv = _linear(h, params, f"blk{i}.qkv").reshape(B, M, 3, H, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    att = ad.dropout(ad.softmax_last(scores), cfg.attn_dropout_rate, rng)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, M, W)
    return _linear(out, params, f"blk{i}.proj")


def condition(cfg: DenoiserConfig, params, t: np.ndarray, class_ids) -> Tensor:
    """Merged time/class condition vector, shape ``(B, W)``, already SiLU-activated."""
    c = Tensor(time_embed(t, cfg.width))
    c = _linear(ad.silu(_linear(c, params, "time1")), params, "time2")
    if cfg.num_classes > 0:
        c = c + ad.embedding_lookup(params["class.emb"], class_ids)
    return ad.silu(c)


def forward(
    cfg: DenoiserConfig,
    params: dict[str, Tensor],
    z,
    t,
    class_ids=None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-token logits ``(B, M, K)`` (or ``(M, K)`` for an unbatched ``z``).

    ``t`` is a scalar or one time per batch element. Dropout is active only
    when ``train`` is set and an ``rng`` is supplied.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    squeeze = z.ndim == 2
    if squeeze:
        z = z.reshape(1, *z.shape)
    B, M, D = z.shape
    if D != cfg.D:
        raise DimensionError(f"expected embedding dim {cfg.D}, got {D}")
    if not np.isfinite(z.data).all():
        raise NumericError("denoiser input contains non-finite values")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if cfg.num_classes > 0:
        if class_ids is None:
            class_ids = cfg.null_class
        class_ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (B,))
    elif class_ids is not None and np.any(np.asarray(class_ids) != 0):
        raise ContractError("class ids given to an unconditional denoiser")

    drop_rng = rng if train else None
    cond = condition(cfg, params, t, class_ids)
    h = _linear(z, params, "in")
    if cfg.use_pos_emb:
        h = h + Tensor(_pos_table(M, cfg.width, h.dtype.type))
    for i in range(cfg.layers):
        hn = adaln(h, cond, params[f"blk{i}.ada1.w"], params[f"blk{i}.ada1.b"])
        h = h + _attention(hn, params, i, cfg, drop_rng)
        hn = adaln(h, cond, params[f"blk{i}.ada2.w"], params[f"blk{i}.ada2.b"])
        h = h + _linear(ad.gelu(_linear(hn, params, f"blk{i}.fc1")), params, f"blk{i}.fc2")
        if not np.isfinite(h.data).all():
            raise NumericError(f"non-finite activations after layer {i}")
    hn = adaln(h, cond, params["final.ada.w"], params["final.ada.b"])
    logits = _linear(hn, params, "out")
    return logits.reshape(M, cfg.K) if squeeze else logits


def predicted_embedding(probs: Tensor, table) -> Tensor:
    """Probability-weighted average of the K category embeddings.

    ``table`` is a Codebook or a ``(K + 1, D)`` tensor; the mask row is never
    part of the average.
    """
    table = getattr(table, "table", table)
    table = table if isinstance(table, Tensor) else Tensor(table)
    K = probs.shape[-1]
    if table.shape[0] != K + 1:
        raise DimensionError(f"probabilities over {K} classes vs table with {table.shape[0]} rows")
    sums = probs.data.sum(axis=-1)
    if np.abs(sums - 1.0).max(initial=0.0) > 1e-5:
        raise ContractError("probability rows must sum to 1 within 1e-5")
    return probs @ table[:K]
