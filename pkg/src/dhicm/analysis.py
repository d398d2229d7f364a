"""Attention / head-importance dumps, head rankings and head-ablation experiments."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import parse_site
from .data import ParallelCorpus, Vocab, batchify, collate
from .decoding import corpus_bleu, greedy_batch, translate
from .model import Model
from .training import evaluate_corpus

KINDS = ("encdec", "importance")


@dataclass
class AttentionDump:
    kind: str
    site: str
    row_labels: list
    col_labels: list
    matrix: np.ndarray
    meta: dict = field(default_factory=dict)

    def write(self, path) -> None:
        """CSV (header = column labels, first column = row labels) plus a JSON sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([""] + [str(c) for c in self.col_labels])
            for label, row in zip(self.row_labels, self.matrix):
                w.writerow([str(label)] + [f"{v:.6f}" for v in row])
        tmp.replace(path)
        side = {"kind": self.kind, "site": self.site, "shape": list(self.matrix.shape), **self.meta}
        sidecar(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "AttentionDump":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        side = json.loads(sidecar(path).read_text()) if sidecar(path).exists() else {}
        kind, site = side.pop("kind", "unknown"), side.pop("site", "")
        side.pop("shape", None)
        matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(kind, site, [r[0] for r in rows[1:]], rows[0][1:], matrix, side)


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".json")


def _labels(ids: Iterable[int], vocab: Optional[Vocab]) -> list:
    ids = [int(i) for i in ids]
    return [vocab.itos[i] for i in ids] if vocab is not None else ids


def _single_pair(model: Model, src: Sequence[int], tgt: Sequence[int], **kw):
    b = collate([(list(src), list(tgt))])
    res = model.forward(b.src, b.tgt_in, training=False, **kw)
    return b, res


def dump_encdec_attention(model: Model, src: Sequence[int], tgt: Sequence[int], layer: int,
                          head: Optional[int] = None, vocab: Optional[Vocab] = None) -> AttentionDump:
    """Encoder-decoder attention of one decoder layer: rows = target, columns = source.

    ``head=None`` averages over heads.  Target rows are the teacher-forced
    output positions (target tokens then eos).
    """
    cfg = model.config
    if not 0 <= layer < cfg.dec_layers:
        raise ValueError(f"layer {layer} out of range [0, {cfg.dec_layers})")
    if head is not None and not 0 <= head < cfg.heads:
        raise ValueError(f"head {head} out of range [0, {cfg.heads})")
    site = f"dec.{layer}.cross"
    b, res = _single_pair(model, src, tgt, keep_attention=True)
    w = res.attention[site][0]                       # [H, M, N]
    mat = w.mean(axis=0) if head is None else w[head]
    return AttentionDump("encdec", site, _labels(b.tgt_out[0], vocab), _labels(b.src[0], vocab),
                         np.asarray(mat, dtype=np.float64), {"head": "mean" if head is None else head})


def dump_head_importance(model: Model, src: Sequence[int], tgt: Sequence[int], site: str,
                         vocab: Optional[Vocab] = None) -> AttentionDump:
    """Head-importance rows at a DHICM site: rows = query tokens, columns = heads."""
    parse_site(site)
    if site not in model.config.dhicm_placement:
        raise ValueError(f"site {site!r} has no DHICM attached (placement: {list(model.config.dhicm_placement)})")
    b, res = _single_pair(model, src, tgt)
    rec = next(r for r in res.records if r.site == site)
    rows = b.src[0] if site.startswith("enc") else b.tgt_in[0]
    return AttentionDump("importance", site, _labels(rows, vocab), [f"head{h}" for h in range(model.config.heads)],
                         np.asarray(rec.a.data[0], dtype=np.float64))


def rank_heads(dumps: Sequence[AttentionDump], site: Optional[str] = None) -> list[int]:
    """Heads ordered by mean importance over every row of every dump (descending).

    Ties keep the lower head index first.
    """
    mats = [d.matrix for d in dumps if site is None or d.site == site]
    if not mats:
        raise ValueError("rank_heads needs at least one dump")
    mean = np.concatenate(mats, axis=0).mean(axis=0)
    return sorted(range(len(mean)), key=lambda h: (-mean[h], h))


def corpus_importance(model: Model, corpus: ParallelCorpus, site: str, max_tokens: int = 2048) -> np.ndarray:
    """Mean head-importance vector at ``site`` over all real query tokens of ``corpus``."""
    if site not in model.config.dhicm_placement:
        raise ValueError(f"site {site!r} has no DHICM attached")
    total = np.zeros(model.config.heads)
    n = 0
    for b in batchify(corpus, max_tokens):
        res = model.forward(b.src, b.tgt_in, training=False)
        rec = next(r for r in res.records if r.site == site)
        m = np.asarray(rec.mask, bool)
        total += rec.a.data[m].sum(axis=0)
        n += int(m.sum())
    return total / n


def rank_heads_corpus(model: Model, corpus: ParallelCorpus, site: str) -> list[int]:
    mean = corpus_importance(model, corpus, site)
    return sorted(range(len(mean)), key=lambda h: (-mean[h], h))


def prune_and_eval(model: Model, site: str, heads_to_zero: Sequence[int], corpus: ParallelCorpus,
                   renormalize: bool = True, beam: int = 1, bleu: bool = True) -> dict:
    """Evaluation-time ablation: zero the listed heads' outputs at ``site``.

    Parameters are untouched.  At a DHICM site importance is renormalised
    over surviving heads unless ``renormalize`` is False.
    """
    heads = sorted(set(int(h) for h in heads_to_zero))
    if len(heads) >= model.config.heads:
        raise ValueError("cannot prune all heads")
    prune = {site: heads} if heads else None
    metrics = evaluate_corpus(model, corpus, prune=prune, renormalize=renormalize)
    out = {"site": site, "pruned": heads, "valid_L_c": metrics["L_c"], "token_acc": metrics["token_acc"]}
    if bleu:
        out["bleu"] = decode_bleu(model, corpus, beam=beam, prune=prune, renormalize=renormalize)
    return out


def decode_bleu(model: Model, corpus: ParallelCorpus, beam: int = 1, prune: Optional[dict] = None,
                renormalize: bool = True) -> float:
    srcs = [s for s, _ in corpus.pairs]
    refs = [t for _, t in corpus.pairs]
    if prune:
        model = _PrunedView(model, prune, renormalize)
    if beam == 1:
        hyps = greedy_batch(model, srcs)
    else:
        hyps = [translate(model, s, beam=beam).output for s in srcs]
    return corpus_bleu(hyps, refs)


class _PrunedView:
    """Model proxy whose every forward pass applies the same head ablation."""

    def __init__(self, model: Model, prune: dict, renormalize: bool):
        self._model, self._prune, self._renorm = model, prune, renormalize

    def __getattr__(self, name):
        return getattr(self._model, name)

    def eval_context(self, **kw):
        return self._model.eval_context(prune=dict(self._prune), renormalize=self._renorm, **kw)

    def encode(self, src, ctx):
        return self._model.encode(src, ctx)

    def decode(self, memory, src_mask, tgt_in, ctx):
        return self._model.decode(memory, src_mask, tgt_in, ctx)


def peak_attention(model: Model, corpus: ParallelCorpus, max_tokens: int = 2048) -> dict:
    """Mean over target tokens of the largest encoder-decoder attention weight, per layer.

    Diagnostic for how sharply the model aligns (head-averaged weights).
    """
    sums: dict[str, float] = {}
    n = 0
    for b in batchify(corpus, max_tokens):
        res = model.forward(b.src, b.tgt_in, training=False, keep_attention=True)
        m = b.tgt_mask
        for site, w in res.attention.items():
            if site.endswith("cross"):
                peak = w.mean(axis=1).max(axis=-1)      # [B, M]
                sums[site] = sums.get(site, 0.0) + float(peak[m].sum())
        n += int(m.sum())
    return {site: s / n for site, s in sums.items()}


def write_gnuplot_matrix(dump: AttentionDump, path) -> None:
    np.savetxt(path, dump.matrix, fmt="%.6f")


def plot_dump(dump: AttentionDump, path) -> None:
    """Heatmap image of a dump; ``.dat``/``.txt`` targets get a gnuplot matrix instead."""
    path = Path(path)
    if path.suffix in (".dat", ".txt"):
        write_gnuplot_matrix(dump, path)
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows, cols = dump.matrix.shape
    fig, ax = plt.subplots(figsize=(max(3, 0.45 * cols + 1.5), max(3, 0.4 * rows + 1)))
    im = ax.imshow(dump.matrix, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(cols), [str(c) for c in dump.col_labels], rotation=90)
    ax.set_yticks(range(rows), [str(r) for r in dump.row_labels])
    ax.set_title(f"{dump.kind} @ {dump.site}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
