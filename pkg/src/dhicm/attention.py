"""Scaled dot-product attention, multi-head attention and the second-level
head-importance attention (DHICM) that replaces the concat-and-project combine.

Shapes use leading batch dimensions ``...``; within one example ``N`` is the
number of key/value positions, ``M`` the number of query positions, ``H`` the
head count and ``d_k = d / H``.  Per-head projection matrices are stored as
column blocks of one ``d x (H*d_k)`` matrix: head ``h`` owns columns
``h*d_k:(h+1)*d_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, dropout, matmul, softmax
from .config import ConfigError, ModelConfig


@dataclass
class MhaParams:
    w_q: Tensor  # [d, H*d_k]
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor  # [H*d_k, d], used only on the baseline path
    heads: int

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.heads

    def head(self, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cols = slice(h * self.d_k, (h + 1) * self.d_k)
        return self.w_q.data[:, cols], self.w_k.data[:, cols], self.w_v.data[:, cols]

    def named(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


@dataclass
class DhicmParams:
    W: Tensor    # [d_m, d_k]
    U: Tensor    # [d_m, d]
    V: Tensor    # [d_m, d_k]
    W_s: Tensor  # [d, d_m]
    dropout: float = 0.0

    def __post_init__(self):
        d_m = self.W.shape[0]
        if self.U.shape[0] != d_m or self.V.shape[0] != d_m or self.W_s.shape[1] != d_m:
            raise ConfigError(
                f"d_m mismatch: W{self.W.shape} U{self.U.shape} V{self.V.shape} W_s{self.W_s.shape}")
        if self.W.shape[1] != self.V.shape[1]:
            raise ConfigError(f"d_k mismatch between W{self.W.shape} and V{self.V.shape}")

    @property
    def d_m(self) -> int:
        return self.W.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {"W": self.W, "U": self.U, "V": self.V, "W_s": self.W_s}

    def num_params(self) -> int:
        return sum(t.size for t in self.named().values())


@dataclass
class ImportanceRecord:
    """Head-importance distributions produced at one DHICM site."""

    site: str
    a: Tensor            # [..., M, H]
    mask: np.ndarray     # [..., M] bool, True = real query position
    scores: Optional[Tensor] = None  # pre-softmax s; lets the KL use a stable log a


def _pad_rows(mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    return None if mask is None else np.asarray(mask, dtype=bool)


def single_head_attention(X: Tensor, Y: Tensor, w_q, w_k, w_v, mask=None) -> Tensor:
    """One attention head: softmax(Y W_q (X W_k)^T / sqrt(d_k)) X W_v.

    ``X`` holds the ``N`` key/value vectors, ``Y`` the ``M`` queries; ``mask``
    is ``[M, N]`` with True where attending is allowed.
    """
    w_q, w_k, w_v = (w if isinstance(w, Tensor) else Tensor(w, dtype=X.dtype) for w in (w_q, w_k, w_v))
    d_k = w_q.shape[1]
    scores = matmul(Y @ w_q, (X @ w_k).swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    weights = softmax(scores, axis=-1, mask=mask)
    return weights @ (X @ w_v)


def multi_head_forward(
    X: Tensor,
    Y: Tensor,
    params: MhaParams,
    mask=None,
    *,
    query_mask=None,
    attn_dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
    return_weights: bool = False,
):
    """Per-head outputs ``O`` of shape ``[..., M, H, d_k]`` before any output projection.

    ``mask`` is ``[..., M, N]`` (True = may attend).  Rows of ``O`` at padded
    query positions (``query_mask`` False) are zero.  With ``return_weights``
    the attention weights ``[..., H, M, N]`` are returned as well.
    """
    H, d_k = params.heads, params.d_k
    *lead_x, N, _ = X.shape
    *lead_y, M, _ = Y.shape
    q = (Y @ params.w_q).reshape(*lead_y, M, H, d_k).swapaxes(-2, -3)   # [..., H, M, d_k]
    k = (X @ params.w_k).reshape(*lead_x, N, H, d_k).swapaxes(-2, -3)   # [..., H, N, d_k]
    v = (X @ params.w_v).reshape(*lead_x, N, H, d_k).swapaxes(-2, -3)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)
    weights = softmax(scores, axis=-1, mask=mask)
    probs = dropout(weights, attn_dropout, rng, training)
    O = (probs @ v).swapaxes(-2, -3)                                        # [..., M, H, d_k]
    qm = _pad_rows(query_mask)
    if qm is not None:
        O = O * qm[..., None, None].astype(O.dtype)
    return (O, weights) if return_weights else O


def baseline_combine(O: Tensor, w_o: Tensor) -> Tensor:
    """Concatenate heads along features and project: the standard combine."""
    *lead, M, H, d_k = O.shape
    if w_o.shape[0] != H * d_k:
        raise ConfigError(f"W_o has {w_o.shape[0]} rows, expected H*d_k = {H * d_k}")
    return O.reshape(*lead, M, H * d_k) @ w_o


def dhicm_scores(x: Tensor, O: Tensor, params: DhicmParams, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Bilinear head scores ``s[m, h] = O[m,h]^T W^T drop(U x_m) / sqrt(d_m)``."""
    ux = x @ params.U.T                          # [..., M, d_m]
    ux = dropout(ux, params.dropout, rng, training)
    r = ux @ params.W                            # [..., M, d_k]  (= W^T U x as a row)
    *lead, M, H, _ = O.shape
    s = matmul(O, r.reshape(*lead, M, -1, 1))    # [..., M, H, 1]
    return s.reshape(*lead, M, H) * (1.0 / math.sqrt(params.d_m))


def dhicm_importance(s: Tensor, head_mask=None) -> Tensor:
    """Softmax over heads; ``head_mask`` (True = keep) restricts it to surviving heads."""
    return softmax(s, axis=-1, mask=head_mask)


def dhicm_combine(a: Tensor, O: Tensor, params: DhicmParams) -> Tensor:
    """``W_s sum_h a_h V O^h`` evaluated as ``W_s V (sum_h a_h O^h)``."""
    *lead, M, H, d_k = O.shape
    pooled = matmul(a.reshape(*lead, M, 1, H), O).reshape(*lead, M, d_k)
    return (pooled @ params.V.T) @ params.W_s.T


def dhicm_forward(
    x: Tensor,
    memory: Tensor,
    mha: MhaParams,
    params: DhicmParams,
    mask=None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    *,
    site: str = "",
    query_mask=None,
    attn_dropout: float = 0.0,
):
    """Multi-head attention followed by the second-level head attention.

    Returns ``(output [..., M, d], ImportanceRecord)``; ``x`` supplies both the
    attention queries and the importance query vector.
    """
    O = multi_head_forward(memory, x, mha, mask, query_mask=query_mask,
                           attn_dropout=attn_dropout, rng=rng, training=training)
    s = dhicm_scores(x, O, params, training=training, rng=rng)
    a = dhicm_importance(s)
    qm = np.ones(x.shape[:-1], dtype=bool) if query_mask is None else np.asarray(query_mask, dtype=bool)
    return dhicm_combine(a, O, params), ImportanceRecord(site, a, qm, s)


def dhicm_param_count(d: int, heads: int, d_m: int, sites: int = 1) -> int:
    d_k = d // heads
    return (2 * d_m * d_k + 2 * d_m * d) * sites


def count_dhicm_params(config: ModelConfig) -> int:
    """Extra parameters the DHICM sites of ``config`` add over the baseline."""
    return dhicm_param_count(config.d, config.heads, config.d_m, len(config.dhicm_placement))
