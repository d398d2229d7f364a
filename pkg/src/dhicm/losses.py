"""Training objective: label-smoothed cross entropy minus a weighted
KL-from-uniform term over head-importance distributions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, log, log_softmax, record_op, where
from .attention import ImportanceRecord


@dataclass
class LossBreakdown:
    L_c: Tensor
    L_KL: Tensor
    total: Tensor
    per_site: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        return {"L_c": self.L_c.item(), "L_KL": self.L_KL.item(), "total": self.total.item()}


def cross_entropy_label_smoothed(logits: Tensor, targets, pad_mask, smoothing: float = 0.0,
                                 pad_id: int | None = 0) -> Tensor:
    """Mean over real positions of ``(1-eps)*NLL + eps*mean_v(-log p_v)``.

    ``pad_mask`` is True at positions that count.  The smoothing mass is
    spread over the vocabulary minus ``pad_id`` (pass ``None`` to spread it
    over every entry).  Fused: the gradient w.r.t. logits is ``p - q``.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {smoothing}")
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    keep = np.asarray(pad_mask, dtype=bool).reshape(-1)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross entropy over an empty batch (every position is padding)")
    if t[keep].min(initial=0) < 0 or t[keep].max(initial=0) >= V:
        raise IndexError("target id outside the vocabulary")

    q = np.zeros_like(z)
    if smoothing > 0:
        cols = np.ones(V, dtype=bool)
        if pad_id is not None:
            cols[pad_id] = False
        q[:, cols] = smoothing / cols.sum()
    q[np.arange(len(t)), np.where(keep, t, 0)] += 1.0 - smoothing
    q[~keep] = 0.0

    zmax = z.max(axis=1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    loss = -(q * logp).sum() / n

    def bw(g):
        p = np.exp(logp) * keep[:, None]
        return ((g / n) * (p - q)).reshape(logits.shape),

    return record_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def kl_uniform(a: Tensor, log_a: Tensor | None = None) -> Tensor:
    """KL(a || uniform) along the last axis, ``ln H - entropy(a)``.

    Zero entries contribute zero.  Pass ``log_a`` (e.g. a log-softmax of the
    scores) to keep the gradient exact where entries of ``a`` underflow.
    """
    H = a.shape[-1]
    if log_a is None:
        log_a = log(where(a.data > 0, a, 1.0))
    # ln H goes inside the sum so a uniform row (log a == -ln H) gives exactly zero
    kl = (a * (log_a + math.log(H))).sum(axis=-1)
    return where(kl.data > 0, kl, 0.0)


def _site_mean(record: ImportanceRecord) -> Tensor:
    m = np.asarray(record.mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError(f"site {record.site!r} has no unmasked positions")
    log_a = log_softmax(record.scores, axis=-1) if record.scores is not None else None
    kl = kl_uniform(record.a, log_a)
    return (kl * m.astype(kl.dtype)).sum() * (1.0 / n)


def aggregate_kl(records: Sequence[ImportanceRecord], per_site: dict | None = None) -> Tensor:
    """Mean KL over unmasked positions of each site, then mean over sites."""
    if not records:
        raise ValueError("no importance records to aggregate")
    total = None
    for rec in records:
        site_kl = _site_mean(rec)
        if per_site is not None:
            per_site[rec.site] = site_kl.item()
        total = site_kl if total is None else total + site_kl
    return total * (1.0 / len(records))


def total_loss(L_c, L_KL, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return L_c - lam * L_KL


def compute_loss(logits: Tensor, targets, pad_mask, records: Sequence[ImportanceRecord],
                 smoothing: float, lam: float, pad_id: int = 0) -> LossBreakdown:
    L_c = cross_entropy_label_smoothed(logits, targets, pad_mask, smoothing, pad_id)
    per_site: dict = {}
    if records:
        L_KL = aggregate_kl(records, per_site)
    else:
        L_KL = Tensor(0.0, dtype=logits.dtype)
    total = total_loss(L_c, L_KL, lam) if records else L_c
    return LossBreakdown(L_c, L_KL, total, per_site)
