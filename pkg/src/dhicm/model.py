"""Encoder-decoder transformer with head-importance attention at configurable sites."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import (DhicmParams, ImportanceRecord, MhaParams, baseline_combine, dhicm_combine,
                        dhicm_importance, dhicm_scores, multi_head_forward)
from .autodiff import Tensor, dropout, embedding, layer_norm, relu
from .config import ConfigError, ModelConfig, derive_rng, parse_site

PAD, BOS, EOS, UNK = 0, 1, 2, 3


class SequenceTooLong(ValueError):
    pass


@dataclass
class ForwardResult:
    logits: Tensor                                   # [B, M, V]
    records: list[ImportanceRecord] = field(default_factory=list)
    attention: dict = field(default_factory=dict)    # site -> weights [B, H, M, N]
    activations: dict = field(default_factory=dict)  # site / "enc.i.ffn" -> sublayer output


@dataclass
class _Context:
    training: bool
    rng: Optional[np.random.Generator]
    keep_attention: bool = False
    trace: bool = False
    prune: dict = field(default_factory=dict)        # site -> iterable of head ids to zero
    renormalize: bool = True
    records: list = field(default_factory=list)
    attention: dict = field(default_factory=dict)
    activations: dict = field(default_factory=dict)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


class Model:
    """Pre-norm transformer; ``config.dhicm_placement`` lists DHICM sites.

    Parameters live in ``self.params`` (name -> Tensor).  Each parameter is
    initialised from its own seed derived from ``(config.seed, name)``, so a
    baseline and a DHICM model built from the same seed share every common
    parameter exactly.
    """

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self.dtype = np.dtype(config.dtype).type
        self.params: dict[str, Tensor] = {}
        self._build()
        self._pe = sinusoidal_positions(config.max_len + 2, config.d).astype(self.dtype)

    # -- construction -----------------------------------------------------
    def _new(self, name: str, shape, kind: str = "xavier") -> Tensor:
        cfg = self.config
        rng = derive_rng(cfg.seed, "init", name)
        if kind == "xavier":
            t = xavier_uniform(rng, shape[0], shape[-1], shape, self.dtype)
        elif kind == "embed":
            t = Tensor(rng.normal(0.0, cfg.d ** -0.5, size=shape).astype(self.dtype), requires_grad=True)
        elif kind == "ones":
            t = Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)
        else:
            t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        t.name = name
        self.params[name] = t
        return t

    def _build(self) -> None:
        cfg = self.config
        d, hd = cfg.d, cfg.heads * cfg.d_k
        self._new("embed", (cfg.vocab_size, d), "embed")
        for site in cfg.all_sites():
            for w in ("w_q", "w_k", "w_v"):
                self._new(f"{site}.{w}", (d, hd))
            if site in cfg.dhicm_placement:
                self._new(f"{site}.W", (cfg.d_m, cfg.d_k))
                self._new(f"{site}.U", (cfg.d_m, d))
                self._new(f"{site}.V", (cfg.d_m, cfg.d_k))
                self._new(f"{site}.W_s", (d, cfg.d_m))
            else:
                self._new(f"{site}.w_o", (hd, d))
            self._new(f"{site}.ln.g", (d,), "ones")
            self._new(f"{site}.ln.b", (d,), "zeros")
        for stack, n in (("enc", cfg.enc_layers), ("dec", cfg.dec_layers)):
            for i in range(n):
                p = f"{stack}.{i}.ffn"
                self._new(f"{p}.w1", (d, cfg.ffn_dim))
                self._new(f"{p}.b1", (cfg.ffn_dim,), "zeros")
                self._new(f"{p}.w2", (cfg.ffn_dim, d))
                self._new(f"{p}.b2", (d,), "zeros")
                self._new(f"{p}.ln.g", (d,), "ones")
                self._new(f"{p}.ln.b", (d,), "zeros")
            self._new(f"{stack}.final_ln.g", (d,), "ones")
            self._new(f"{stack}.final_ln.b", (d,), "zeros")

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def mha_params(self, site: str) -> MhaParams:
        p = self.params
        return MhaParams(p[f"{site}.w_q"], p[f"{site}.w_k"], p[f"{site}.w_v"],
                         p.get(f"{site}.w_o"), self.config.heads)

    def dhicm_params(self, site: str) -> Optional[DhicmParams]:
        if site not in self.config.dhicm_placement:
            return None
        p = self.params
        return DhicmParams(p[f"{site}.W"], p[f"{site}.U"], p[f"{site}.V"], p[f"{site}.W_s"],
                           self.config.dhicm_dropout)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- sublayers --------------------------------------------------------
    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _attention(self, site: str, x: Tensor, memory: Optional[Tensor], mask, qmask, ctx: _Context) -> Tensor:
        cfg = self.config
        h = self._ln(x, f"{site}.ln")
        mem = h if memory is None else memory
        mha = self.mha_params(site)
        O, weights = multi_head_forward(mem, h, mha, mask, query_mask=qmask, attn_dropout=cfg.attention_dropout,
                                        rng=ctx.rng, training=ctx.training, return_weights=True)
        if ctx.keep_attention:
            ctx.attention[site] = weights.data
        keep = None
        if site in ctx.prune:
            keep = np.ones(cfg.heads, dtype=bool)
            keep[list(ctx.prune[site])] = False
            O = O * keep[:, None].astype(O.dtype)
        dp = self.dhicm_params(site)
        if dp is None:
            out = baseline_combine(O, mha.w_o)
        else:
            s = dhicm_scores(h, O, dp, training=ctx.training, rng=ctx.rng)
            scores = None
            if keep is not None and ctx.renormalize:
                a = dhicm_importance(s, head_mask=keep)
            elif keep is not None:
                a = dhicm_importance(s) * keep.astype(s.dtype)
            else:
                a, scores = dhicm_importance(s), s
            ctx.records.append(ImportanceRecord(site, a, np.asarray(qmask, dtype=bool), scores))
            out = dhicm_combine(a, O, dp)
        out = dropout(out, cfg.dropout, ctx.rng, ctx.training)
        if ctx.trace:
            ctx.activations[site] = out.data
        return x + out

    def _ffn(self, prefix: str, x: Tensor, ctx: _Context) -> Tensor:
        cfg, p = self.config, self.params
        h = self._ln(x, f"{prefix}.ln")
        h = relu(h @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
        h = dropout(h, cfg.activation_dropout, ctx.rng, ctx.training)
        h = h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]
        h = dropout(h, cfg.dropout, ctx.rng, ctx.training)
        if ctx.trace:
            ctx.activations[prefix] = h.data
        return x + h

    def _embed(self, ids: np.ndarray, ctx: _Context) -> Tensor:
        cfg = self.config
        x = embedding(self.params["embed"], ids) * math.sqrt(cfg.d) + self._pe[: ids.shape[-1]]
        return dropout(x, cfg.dropout, ctx.rng, ctx.training)

    def _check_len(self, ids: np.ndarray, what: str) -> None:
        if ids.shape[-1] > self.config.max_len + 1:
            raise SequenceTooLong(f"{what} length {ids.shape[-1]} exceeds max_len={self.config.max_len} "
                                  f"(+1 for bos/eos framing)")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"{what} token id outside vocabulary of size {self.config.vocab_size}")

    # -- passes -----------------------------------------------------------
    def encode(self, src: np.ndarray, ctx: _Context):
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        self._check_len(src, "source")
        src_mask = src != PAD
        x = self._embed(src, ctx)
        key_mask = src_mask[:, None, :]
        for i in range(self.config.enc_layers):
            x = self._attention(f"enc.{i}.self", x, None, key_mask, src_mask, ctx)
            x = self._ffn(f"enc.{i}.ffn", x, ctx)
        return self._ln(x, "enc.final_ln"), src_mask

    def decode(self, memory: Tensor, src_mask: np.ndarray, tgt_in: np.ndarray, ctx: _Context) -> Tensor:
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        self._check_len(tgt_in, "target")
        M = tgt_in.shape[1]
        tgt_mask = tgt_in != PAD
        tgt_mask[:, 0] = True  # bos slot is always real
        self_mask = np.tril(np.ones((M, M), dtype=bool))[None] & tgt_mask[:, None, :]
        cross_mask = src_mask[:, None, :]
        y = self._embed(tgt_in, ctx)
        for i in range(self.config.dec_layers):
            y = self._attention(f"dec.{i}.self", y, None, self_mask, tgt_mask, ctx)
            y = self._attention(f"dec.{i}.cross", y, memory, cross_mask, tgt_mask, ctx)
            y = self._ffn(f"dec.{i}.ffn", y, ctx)
        y = self._ln(y, "dec.final_ln")
        return y @ self.params["embed"].T

    def forward(self, src, tgt_in, training: bool = False, rng: Optional[np.random.Generator] = None,
                *, keep_attention: bool = False, trace: bool = False, prune: Optional[dict] = None,
                renormalize: bool = True) -> ForwardResult:
        """Logits for teacher-forced decoder input ``tgt_in`` (bos + target).

        ``prune`` maps site ids to heads whose outputs are zeroed (evaluation
        ablation); at DHICM sites importance is renormalised over survivors
        unless ``renormalize`` is False.
        """
        if training and rng is None:
            raise ValueError("training forward needs an rng for dropout")
        ctx = _Context(training, rng, keep_attention, trace, dict(prune or {}), renormalize)
        for site, heads in ctx.prune.items():
            parse_site(site)
            if site not in self.config.all_sites():
                raise ConfigError(f"unknown site {site!r}")
            if len(set(heads)) >= self.config.heads:
                raise ValueError("cannot prune all heads")
            if any(not 0 <= h < self.config.heads for h in heads):
                raise ValueError(f"head ids must lie in [0, {self.config.heads})")
        memory, src_mask = self.encode(src, ctx)
        logits = self.decode(memory, src_mask, tgt_in, ctx)
        return ForwardResult(logits, ctx.records, ctx.attention, ctx.activations)

    __call__ = forward

    def eval_context(self, **kw) -> _Context:
        return _Context(False, None, **kw)


def build_model(config: ModelConfig) -> Model:
    return Model(config)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, model: Model, state: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    """Single ``.npz`` holding every tensor plus a JSON header.

    ``state`` may carry optimizer moments (``m``/``v`` dicts of arrays) and
    scalar bookkeeping; scalars and ``meta`` go into the JSON header.  The
    file is written to a temporary name and renamed, so a crash never leaves a
    half-written checkpoint.
    """
    path = Path(path)
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    header = {"config": asdict(model.config), "meta": meta or {}}
    if state:
        for key in ("m", "v"):
            for k, arr in state.get(key, {}).items():
                arrays[f"{key}/{k}"] = arr
        header["state"] = {k: v for k, v in state.items() if k not in ("m", "v")}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(model, state, meta)`` restored bit-exactly from ``path``."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        cfg_dict = header["config"]
        cfg_dict["dhicm_placement"] = tuple(cfg_dict["dhicm_placement"]) or ("none",)
        model = Model(ModelConfig(**cfg_dict))
        for k, p in model.params.items():
            p.data = z[f"param/{k}"].copy()
        state = dict(header.get("state", {}))
        for key in ("m", "v"):
            prefix = f"{key}/"
            got = {n[len(prefix):]: z[n].copy() for n in z.files if n.startswith(prefix)}
            if got:
                state[key] = got
    return model, state, header.get("meta", {})
