"""Optimisation protocol: Adam, inverse-square-root warmup, per-epoch
validation, best-checkpoint selection and early stopping."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape, Tensor
from .config import TrainConfig, derive_rng, derive_seed
from .data import Batch, ParallelCorpus, batchify
from .losses import compute_loss
from .model import Model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


def lr_schedule(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` at ``warmup``, then decay as ``1/sqrt(step)``."""
    if step < 1:
        raise ValueError("lr_schedule is defined for step >= 1")
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_valid: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    rng_state: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "m": self.m, "v": self.v,
                "best_valid": self.best_valid if math.isfinite(self.best_valid) else None,
                "best_epoch": self.best_epoch, "bad_epochs": self.bad_epochs, "rng_state": self.rng_state}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        best = d.get("best_valid")
        return cls(d.get("step", 0), d.get("epoch", 0), d.get("m", {}), d.get("v", {}),
                   math.inf if best is None else best, d.get("best_epoch", 0), d.get("bad_epochs", 0),
                   d.get("rng_state"))


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-6):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: dict, state: TrainState, lr: float) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient in parameter {name!r} at step {state.step + 1}")
        state.step += 1
        t = state.step
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m, v = np.zeros_like(p.data), np.zeros_like(p.data)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            state.m[name], state.v[name] = m, v
            p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def adam_step(params: dict, state: TrainState, lr: float, beta1: float = 0.9, beta2: float = 0.98,
              eps: float = 1e-6) -> None:
    Adam(beta1, beta2, eps).step(params, state, lr)


def clip_grad_norm(params: dict, max_norm: float) -> float:
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower loss."""

    def __init__(self, patience: float = 10, best: float = math.inf, bad_epochs: int = 0):
        self.patience = patience
        self.best = best
        self.bad_epochs = bad_epochs

    def update(self, loss: float) -> bool:
        """Record one epoch's loss; True if it is a new best."""
        if loss < self.best:
            self.best, self.bad_epochs = loss, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# -- evaluation -----------------------------------------------------------------

def importance_entropy(records) -> dict[str, tuple[float, int]]:
    """Per site: (summed entropy in nats of head-importance rows, number of real rows)."""
    out = {}
    for rec in records:
        a = rec.a.data.astype(np.float64)
        ent = -(a * np.log(np.where(a > 0, a, 1.0))).sum(-1)
        m = np.asarray(rec.mask, bool)
        out[rec.site] = (float(ent[m].sum()), int(m.sum()))
    return out


def evaluate_corpus(model: Model, corpus: ParallelCorpus, max_tokens: int = 2048, prune: Optional[dict] = None,
                    renormalize: bool = True, batches: Optional[list[Batch]] = None) -> dict:
    """Eval-mode L_c, L_KL, token accuracy and importance entropy over ``corpus``.

    Losses are token-weighted means, matching a single pass over the corpus.
    """
    cfg = model.config
    batches = batches if batches is not None else batchify(corpus, max_tokens)
    if not batches:
        raise ValueError("cannot evaluate an empty corpus")
    tot_lc = tot_kl = 0.0
    ntok = correct = 0
    ent_sum: dict[str, float] = {}
    ent_n: dict[str, int] = {}
    for b in batches:
        res = model.forward(b.src, b.tgt_in, training=False, prune=prune, renormalize=renormalize)
        lb = compute_loss(res.logits, b.tgt_out, b.tgt_mask, res.records, cfg.label_smoothing, cfg.lam)
        n = b.ntokens
        tot_lc += lb.L_c.item() * n
        tot_kl += lb.L_KL.item() * n
        ntok += n
        pred = res.logits.data.argmax(-1)
        correct += int(((pred == b.tgt_out) & b.tgt_mask).sum())
        for site, (s, k) in importance_entropy(res.records).items():
            ent_sum[site] = ent_sum.get(site, 0.0) + s
            ent_n[site] = ent_n.get(site, 0) + k
    entropy = {s: ent_sum[s] / ent_n[s] for s in ent_sum}
    return {"L_c": tot_lc / ntok, "L_KL": tot_kl / ntok, "token_acc": correct / ntok,
            "importance_entropy": entropy,
            "mean_importance_entropy": float(np.mean(list(entropy.values()))) if entropy else None}


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model                 # parameters of the best epoch
    state: TrainState
    history: list = field(default_factory=list)
    epochs_run: int = 0
    stopped_early: bool = False
    best_path: Optional[Path] = None


class JsonlLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self.path:
            self._fh.close()


def _snapshot(model: Model) -> dict:
    return {k: p.data.copy() for k, p in model.params.items()}


def train(model: Model, train_corpus: ParallelCorpus, valid_corpus: ParallelCorpus, cfg: TrainConfig,
          out_dir=None, state: Optional[TrainState] = None,
          validate: Optional[Callable[[Model, int], dict]] = None,
          bleu_fn: Optional[Callable[[Model], float]] = None) -> TrainResult:
    """Train until ``max_epochs``/``max_steps`` or early stopping.

    Checkpoint selection uses validation ``L_c`` alone.  With ``out_dir``
    the run writes ``log.jsonl``, ``last.npz`` after every epoch and
    ``best.npz`` whenever validation improves.  Passing the ``state`` stored
    in ``last.npz`` resumes exactly where that epoch ended.  ``validate``
    replaces the built-in validation pass (tests script loss sequences
    through it).
    """
    if not len(train_corpus) or (validate is None and not len(valid_corpus)):
        raise ValueError("training needs non-empty train and valid corpora")
    mcfg = model.config
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    logf = JsonlLog(out / "log.jsonl" if out else None)
    state = state or TrainState()
    rng = np.random.default_rng(derive_seed(mcfg.seed, "dropout"))
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    opt = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    warmup = cfg.resolved_warmup()
    stopper = EarlyStopping(cfg.patience, state.best_valid, state.bad_epochs)
    batches = batchify(train_corpus, cfg.max_tokens)
    valid_batches = batchify(valid_corpus, cfg.max_tokens) if validate is None else None
    best_params = _snapshot(model)
    if state.epoch and out and (out / "best.npz").exists():
        best_params = _snapshot(load_checkpoint(out / "best.npz")[0])
    elif out and not state.epoch:
        save_checkpoint(out / "best.npz", model, state.to_dict(), {"epoch": 0})

    epochs_run, stopped = 0, False
    meta = {"train_digest": train_corpus.digest(), "warmup": warmup}
    try:
        for epoch in range(state.epoch + 1, cfg.max_epochs + 1):
            if cfg.max_steps and state.step >= cfg.max_steps:
                break
            order = derive_rng(mcfg.seed, "shuffle", epoch).permutation(len(batches))
            for bi in order:
                b = batches[bi]
                lr = lr_schedule(state.step + 1, cfg.lr, warmup)
                model.zero_grad()
                with Tape() as tape:
                    res = model.forward(b.src, b.tgt_in, training=True, rng=rng)
                    lb = compute_loss(res.logits, b.tgt_out, b.tgt_mask, res.records, mcfg.label_smoothing, mcfg.lam)
                total = lb.total.item()
                if not math.isfinite(total):
                    raise TrainingDiverged(f"loss became {total} at step {state.step + 1}")
                tape.backward(lb.total)
                gnorm = clip_grad_norm(model.params, cfg.clip_norm)
                opt.step(model.params, state, lr)
                logf.write({"step": state.step, "epoch": epoch, "L_c": lb.L_c.item(), "L_KL": lb.L_KL.item(),
                            "total": total, "lr": lr, "grad_norm": gnorm})
                if cfg.max_steps and state.step >= cfg.max_steps:
                    break
            epochs_run += 1
            if validate is not None:
                metrics = validate(model, epoch)
            else:
                metrics = evaluate_corpus(model, valid_corpus, batches=valid_batches)
            improved = stopper.update(metrics["L_c"])
            state.epoch = epoch
            state.best_valid, state.bad_epochs = stopper.best, stopper.bad_epochs
            if improved:
                state.best_epoch = epoch
                best_params = _snapshot(model)
            state.rng_state = rng.bit_generator.state
            bleu = bleu_fn(model) if (bleu_fn and cfg.log_bleu) else None
            logf.write({"epoch": epoch, "valid_L_c": metrics["L_c"], "valid_L_KL": metrics.get("L_KL"),
                        "bleu": bleu, "best_so_far": stopper.best, "improved": improved})
            if out:
                if improved:
                    save_checkpoint(out / "best.npz", model, state.to_dict(), dict(meta, epoch=epoch))
                save_checkpoint(out / "last.npz", model, state.to_dict(), dict(meta, epoch=epoch))
            if stopper.should_stop:
                stopped = True
                break
    finally:
        logf.close()

    best = copy.copy(model)
    best.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in best_params.items()}
    return TrainResult(best, state, logf.records, epochs_run, stopped, out / "best.npz" if out else None)
