"""Multi-head attention built from the autograd primitives.

Projections are bias-free; per-head weights are stored as column blocks of a
single matrix and sliced out with narrow(), so each head i effectively owns
W_i^Q, W_i^K, W_i^V exactly as in the usual concatenated-heads formulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat, matmul, narrow, scale, softmax, transpose
from .errors import ConfigError, DimensionError
from .params import ParamStore, glorot
from .rng import Rng


@dataclass
class AttentionParams:
    wq: Tensor  # (dq,  heads*dh)
    wk: Tensor  # (dkv, heads*dh)
    wv: Tensor  # (dkv, heads*dh)
    wo: Tensor  # (heads*dh, dout)
    heads: int

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.heads


def init_attention(store: ParamStore, prefix: str, rng: Rng, dq: int, dkv: int,
                   dout: int, heads: int, dtype=np.float32) -> AttentionParams:
    """Register attention weights; per-head dim is dout/heads."""
    if heads < 1:
        raise ConfigError(f"head count must be >= 1, got {heads}")
    if dout % heads != 0:
        raise ConfigError(f"output dim {dout} not divisible by {heads} heads")
    dh = dout // heads
    inner = heads * dh
    wq = store.add(prefix + "/wq", Tensor(glorot(rng.split("wq"), (dq, inner), dq, inner, dtype), requires_grad=True))
    wk = store.add(prefix + "/wk", Tensor(glorot(rng.split("wk"), (dkv, inner), dkv, inner, dtype), requires_grad=True))
    wv = store.add(prefix + "/wv", Tensor(glorot(rng.split("wv"), (dkv, inner), dkv, inner, dtype), requires_grad=True))
    wo = store.add(prefix + "/wo", Tensor(glorot(rng.split("wo"), (inner, dout), inner, dout, dtype), requires_grad=True))
    return AttentionParams(wq=wq, wk=wk, wv=wv, wo=wo, heads=heads)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor,
                         params: AttentionParams) -> Tensor:
    """Scaled dot-product attention over dense rows.

    q: (Nq, dq); k, v: (Nk, dkv). Returns (Nq, dout). Attention rows sum to 1
    per head by construction of the softmax.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention inputs must be 2-D (rows x channels)")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key/value row counts differ: {k.shape} vs {v.shape}")
    if q.shape[1] != params.wq.shape[0] or k.shape[1] != params.wk.shape[0]:
        raise DimensionError(
            f"input dims {q.shape[1]}/{k.shape[1]} do not match projections "
            f"{params.wq.shape[0]}/{params.wk.shape[0]}"
        )
    dh = params.head_dim
    qp = matmul(q, params.wq)  # (Nq, H*dh)
    kp = matmul(k, params.wk)
    vp = matmul(v, params.wv)
    outs = []
    for h in range(params.heads):
        qh = narrow(qp, 1, h * dh, dh)
        kh = narrow(kp, 1, h * dh, dh)
        vh = narrow(vp, 1, h * dh, dh)
        scores = scale(matmul(qh, transpose(kh)), 1.0 / float(np.sqrt(dh)))
        outs.append(matmul(softmax(scores, axis=-1), vh))
    return matmul(concat(outs, axis=1), params.wo)
