"""Single attention, multi-head attention and the residual attention block.

Queries may be unbatched (``n_q x C``) while keys/values carry a leading batch
axis (``N x n_v x C``); the matrix products broadcast over it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def att(Q, K, V, scaled: bool = True, return_weights: bool = False):
    """softmax(Q K^T) V, with logits divided by sqrt(d_q) when ``scaled``."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    logits = T.matmul(Q, T.transpose(K, _swap_last(K.ndim)))
    if scaled:
        logits = T.scale(logits, 1.0 / math.sqrt(Q.shape[-1]))
    weights = T.softmax(logits, axis=-1)
    out = T.matmul(weights, V)
    return (out, weights) if return_weights else out


def _swap_last(ndim: int) -> Tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


@dataclass
class MultiHeadParams:
    """Weights of a multi-head attention block mapping width C to width D.

    ``wq``, ``wk``, ``wv`` hold one C x D/h matrix per head; ``wo`` and
    ``wq_res`` are D x D.
    """

    wq: List[Tensor]
    wk: List[Tensor]
    wv: List[Tensor]
    wo: Tensor
    wq_res: Tensor
    scaled: bool = True

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def in_dim(self) -> int:
        return self.wq[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.wo.shape[1]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, heads: int, rng: np.random.Generator,
             scaled: bool = True, dtype=np.float64) -> "MultiHeadParams":
        if heads < 1 or out_dim % heads:
            raise ValueError(f"output width {out_dim} not divisible by {heads} heads")
        dh = out_dim // heads

        def mat(fi, fo):
            return Tensor(glorot_uniform(rng, fi, fo, dtype), requires_grad=True)

        wq = [mat(in_dim, dh) for _ in range(heads)]
        wk = [mat(in_dim, dh) for _ in range(heads)]
        wv = [mat(in_dim, dh) for _ in range(heads)]
        return cls(wq, wk, wv, mat(out_dim, out_dim), mat(out_dim, out_dim), scaled)

    def validate(self) -> None:
        h = self.heads
        if not (len(self.wk) == len(self.wv) == h) or h == 0:
            raise ShapeError("inconsistent head counts")
        c, d = self.in_dim, self.out_dim
        if d % h:
            raise ShapeError(f"output width {d} not divisible by {h} heads")
        for w in (*self.wq, *self.wk, *self.wv):
            if w.shape != (c, d // h):
                raise ShapeError(f"head projection has shape {w.shape}, expected {(c, d // h)}")
        for w in (self.wo, self.wq_res):
            if w.shape != (d, d):
                raise ShapeError(f"output projection has shape {w.shape}, expected {(d, d)}")

    def named(self, prefix: str = "attn") -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for k in range(self.heads):
            out[f"{prefix}.head{k}.wq"] = self.wq[k]
            out[f"{prefix}.head{k}.wk"] = self.wk[k]
            out[f"{prefix}.head{k}.wv"] = self.wv[k]
        out[f"{prefix}.wo"] = self.wo
        out[f"{prefix}.wq_res"] = self.wq_res
        return out


def _check_inputs(Q: Tensor, K: Tensor, V: Tensor, params: MultiHeadParams) -> None:
    params.validate()
    for name, x in (("Q", Q), ("K", K), ("V", V)):
        if x.shape[-1] != params.in_dim:
            raise ShapeError(f"{name} width {x.shape[-1]} != projection input width {params.in_dim}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"{K.shape[-2]} keys but {V.shape[-2]} values")


def multi_att(Q, K, V, params: MultiHeadParams, return_weights: bool = False):
    """concat_k att(Q Wq_k, K Wk_k, V Wv_k) @ Wo."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    _check_inputs(Q, K, V, params)
    outs, weights = [], []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        o, w = att(Q @ wq, K @ wk, V @ wv, scaled=params.scaled, return_weights=True)
        outs.append(o)
        weights.append(w)
    out = T.concat(outs, axis=-1) @ params.wo
    return (out, weights) if return_weights else out


def query_projection(Q, params: MultiHeadParams) -> Tensor:
    return T.concat([T.as_tensor(Q) @ wq for wq in params.wq], axis=-1)


def multi_att_block(Q, K, V, params: MultiHeadParams, return_weights: bool = False):
    """Q' + Q' Wq_res where Q' = concat_k(Q Wq_k) + multi_att(Q, K, V)."""
    Q = T.as_tensor(Q)
    mh, weights = multi_att(Q, K, V, params, return_weights=True)
    q_prime = query_projection(Q, params) + mh
    out = q_prime + q_prime @ params.wq_res
    return (out, weights) if return_weights else out


def attention_maps(weights: List[Tensor]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack per-head weights to (..., h, n_q, n_v) and their head mean."""
    per_head = np.stack([w.data for w in weights], axis=-3)
    return per_head, per_head.mean(axis=-3)


__all__ = [
    "att",
    "multi_att",
    "multi_att_block",
    "query_projection",
    "MultiHeadParams",
    "attention_maps",
    "glorot_uniform",
]
