"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(fn: Callable[[], Tensor], params: dict, h: float = 1e-5, tol: float = 1e-4,
                    max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                    floor: float = 1e-8) -> list[GradCheckResult]:
    """Compare tape gradients of scalar ``fn()`` with central differences.

    ``fn`` must rebuild the loss from the current contents of ``params``
    (name -> Tensor) deterministically.  With ``max_entries`` only a random
    subset of each tensor's entries is perturbed.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}

    results = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        err = rel_error(analytic[name].reshape(-1)[idx], numeric, floor)
        results.append(GradCheckResult(name, float(err.max()) if err.size else 0.0, len(idx), tol))
    return results


def primitive_suite(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], dict]]:
    """Small scalar functions exercising every differentiable primitive."""
    from . import autodiff as ad

    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)

    a, b, c = leaf(3, 4), leaf(4, 2), leaf(3, 4)
    s, g, beta = leaf(2, 3, 5), leaf(5), leaf(5)
    pos = Tensor(rng.uniform(0.5, 2, size=(3, 4)), requires_grad=True)
    emb = leaf(6, 3)
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    mask = rng.random((2, 3, 5)) > 0.3
    mask[..., 0] = True
    weights = Tensor(rng.normal(size=(2, 3, 5)))
    w32, w56, w233 = (Tensor(rng.normal(size=shape)) for shape in ((3, 2), (5, 6), (2, 3, 3)))
    drop_seed = int(rng.integers(1 << 30))

    suite = [
        ("matmul", lambda: (ad.matmul(a, b) * w32).sum(), {"a": a, "b": b}),
        ("add_mul_sub_div", lambda: ((a * c - a / pos + c) * a).sum(), {"a": a, "c": c, "pos": pos}),
        ("exp_log", lambda: (ad.exp(a * 0.5) + ad.log(pos)).sum(), {"a": a, "pos": pos}),
        ("relu", lambda: (ad.relu(a) * c).sum(), {"a": a, "c": c}),
        ("softmax_masked", lambda: (ad.softmax(s, axis=-1, mask=mask) * weights).sum(), {"s": s}),
        ("softmax_axis1", lambda: (ad.softmax(s, axis=1) * weights).sum(), {"s": s}),
        ("log_softmax", lambda: (ad.log_softmax(s, axis=-1) * weights).sum(), {"s": s}),
        ("layer_norm", lambda: (ad.layer_norm(s, g, beta) * weights).sum(), {"s": s, "g": g, "beta": beta}),
        ("reshape_transpose_sum", lambda: (s.transpose(2, 0, 1).reshape(5, 6) * w56).mean(axis=0).sum(), {"s": s}),
        ("embedding", lambda: (ad.embedding(emb, ids) * w233).sum(), {"emb": emb}),
        ("dropout", lambda: (ad.dropout(a, 0.3, np.random.default_rng(drop_seed), True) * c).sum(), {"a": a}),
        ("where", lambda: (ad.where(a.data > 0, a, 0.0) * c).sum(), {"a": a}),
        ("getitem", lambda: (a[1:, ::2] * a[1:, ::2]).sum(), {"a": a}),
        ("concat", lambda: (ad.concat([a, c], axis=1) * ad.concat([c, a], axis=1)).sum(), {"a": a, "c": c}),
    ]
    return suite


def run_suite(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> list[GradCheckResult]:
    """Primitive checks followed by a full DHICM model check; used by the CLI."""
    results = []
    for name, fn, params in primitive_suite(seed):
        for r in check_gradients(fn, params, h=h, tol=tol):
            r.name = f"{name}:{r.name}"
            results.append(r)
    results += model_gradcheck(seed, h=h, tol=tol)
    return results


def model_gradcheck(seed: int = 0, h: float = 1e-5, tol: float = 1e-4, max_entries: Optional[int] = None,
                    lam: float = 0.1, config_overrides: Optional[dict] = None,
                    floor: float = 1e-6) -> list[GradCheckResult]:
    """Gradient of ``L_c - lam * L_KL`` on a tiny model with every default DHICM site.

    The loss is O(1) and is evaluated with rounding noise near 1e-16, so a
    central difference at ``h=1e-5`` carries ~1e-11 absolute noise; ``floor``
    keeps near-zero gradient entries from being judged on that noise alone.
    """
    from .config import ModelConfig
    from .losses import compute_loss
    from .model import Model

    kw = dict(d=16, heads=2, d_m=16, enc_layers=1, dec_layers=1, ffn_dim=24, vocab_size=11, max_len=8,
              dropout=0.0, attention_dropout=0.0, activation_dropout=0.0, dhicm_dropout=0.0,
              label_smoothing=0.1, lam=lam, seed=seed, dtype="float64")
    kw.update(config_overrides or {})
    cfg = ModelConfig(**kw)
    model = Model(cfg)
    rng = np.random.default_rng(seed + 1)
    src = rng.integers(4, cfg.vocab_size, size=(2, 5))
    src[1, 3:] = 0
    tgt = rng.integers(4, cfg.vocab_size, size=(2, 5))
    tgt[0, 4:] = 0
    tgt_in = np.concatenate([np.ones((2, 1), dtype=np.int64), tgt[:, :-1]], axis=1)

    def loss_fn():
        res = model.forward(src, tgt_in, training=False)
        return compute_loss(res.logits, tgt, tgt != 0, res.records, cfg.label_smoothing, cfg.lam).total

    return check_gradients(loss_fn, model.params, h=h, tol=tol, max_entries=max_entries,
                           rng=np.random.default_rng(seed + 2), floor=floor)
