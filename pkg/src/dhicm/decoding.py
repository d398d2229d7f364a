"""Greedy and beam-search generation, and corpus-level BLEU."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, log_softmax
from .model import BOS, EOS, PAD, Model

# prefixes [K, t] (bos first) -> next-token log-probabilities [K, V]
StepFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list = field(default_factory=list)   # generated ids, final eos included
    logprob: float = 0.0
    score: float = 0.0
    finished: bool = False
    truncated: bool = False

    @property
    def output(self) -> list:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)


def _normalised(logprob: float, length: int, alpha: float) -> float:
    return logprob / (length ** alpha) if alpha else logprob


def greedy_decode(step_fn: StepFn, max_len: int, bos: int = BOS, eos: int = EOS) -> Hypothesis:
    toks: list[int] = []
    total = 0.0
    for _ in range(max_len):
        lp = step_fn(np.array([[bos] + toks]))[0]
        tok = int(np.argmax(lp))  # first max = lowest id on ties
        total += float(lp[tok])
        toks.append(tok)
        if tok == eos:
            return Hypothesis(toks, total, total, True, False)
    return Hypothesis(toks + [eos], total, total, True, True)


def beam_search(step_fn: StepFn, beam_size: int, max_len: int, alpha: float = 1.0,
                bos: int = BOS, eos: int = EOS) -> Hypothesis:
    """Beam search scored by ``logprob / length**alpha`` (length counts the eos).

    Each step ranks the ``2 * beam_size`` best extensions by cumulative
    log-probability (ties: lower token id, then earlier beam).  An eos
    extension ranked inside the top ``beam_size`` becomes a finished
    hypothesis; the remaining best non-eos extensions form the next beam.
    Search ends once ``beam_size`` hypotheses have finished or ``max_len``
    tokens were generated, in which case live hypotheses are closed with
    a forced eos and flagged as truncated.  ``beam_size=1`` is greedy decoding.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    live: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        prefixes = np.array([[bos] + toks for toks, _ in live])
        lp = step_fn(prefixes)
        cum = np.array([s for _, s in live])[:, None] + lp
        K, V = cum.shape
        flat = cum.reshape(-1)
        beam_idx, tok_idx = np.divmod(np.arange(K * V), V)
        order = np.lexsort((beam_idx, tok_idx, -flat))
        order = order[np.isfinite(flat[order])][: 2 * beam_size]
        nxt = []
        for rank, j in enumerate(order):
            toks = live[beam_idx[j]][0] + [int(tok_idx[j])]
            score = float(flat[j])
            if tok_idx[j] == eos:
                if rank < beam_size:
                    finished.append(Hypothesis(toks, score, _normalised(score, len(toks), alpha), True, False))
            elif len(nxt) < beam_size:
                nxt.append((toks, score))
        live = nxt
        if len(finished) >= beam_size or not live:
            break
    else:
        for toks, score in live:
            full = toks + [eos]
            finished.append(Hypothesis(full, score, _normalised(score, len(full), alpha), True, True))
    best = finished[0]
    for h in finished[1:]:
        if h.score > best.score:
            best = h
    return best


class ModelScorer:
    """Step function over one source sentence; encodes the source once."""

    def __init__(self, model: Model, src: Sequence[int], banned: Sequence[int] = (PAD, BOS)):
        self.model = model
        ids = np.asarray(list(src) + [EOS], dtype=np.int64)[None, :]
        ctx = model.eval_context()
        self.memory, self.src_mask = model.encode(ids, ctx)
        self.banned = list(banned)

    def __call__(self, prefixes: np.ndarray) -> np.ndarray:
        K = len(prefixes)
        mem = self.memory.data
        memory = Tensor(np.broadcast_to(mem, (K,) + mem.shape[1:]).copy())
        src_mask = np.broadcast_to(self.src_mask, (K, self.src_mask.shape[1]))
        logits = self.model.decode(memory, src_mask, prefixes, self.model.eval_context())
        lp = log_softmax(Tensor(logits.data[:, -1, :])).data
        lp[:, self.banned] = -np.inf
        return lp


def translate(model: Model, src: Sequence[int], beam: int = 5, max_len: Optional[int] = None,
              alpha: float = 1.0) -> Hypothesis:
    max_len = max_len or model.config.max_len
    scorer = ModelScorer(model, src)
    if beam == 1:
        return greedy_decode(scorer, max_len)
    return beam_search(scorer, beam, max_len, alpha)


def greedy_batch(model: Model, sources: Sequence[Sequence[int]], max_len: Optional[int] = None,
                 chunk: int = 128) -> list[list[int]]:
    """Greedy outputs for many sentences at once (eos stripped)."""
    from .data import collate
    max_len = max_len or model.config.max_len
    outs: list[list[int]] = []
    for start in range(0, len(sources), chunk):
        part = sources[start:start + chunk]
        b = collate([(s, [0]) for s in part])
        ctx = model.eval_context()
        memory, src_mask = model.encode(b.src, ctx)
        B = len(part)
        prefix = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            logits = model.decode(memory, src_mask, prefix, model.eval_context()).data[:, -1, :]
            logits[:, [PAD, BOS]] = -np.inf
            tok = logits.argmax(-1)
            tok[done] = PAD
            prefix = np.concatenate([prefix, tok[:, None]], axis=1)
            done |= tok == EOS
            if done.all():
                break
        for row in prefix[:, 1:]:
            seq = []
            for t in row:
                if t in (EOS, PAD):
                    break
                seq.append(int(t))
            outs.append(seq)
    return outs


# -- BLEU ---------------------------------------------------------------------------

def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_stats(hyp: Sequence, ref: Sequence, max_n: int = 4) -> np.ndarray:
    """[hyp_len, ref_len, match_1, total_1, ..., match_n, total_n]."""
    stats = [len(hyp), len(ref)]
    for n in range(1, max_n + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        stats += [sum(min(c, r[g]) for g, c in h.items()), max(len(hyp) - n + 1, 0)]
    return np.array(stats, dtype=np.int64)


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100]: clipped n-gram precisions, geometric mean, brevity penalty.

    No smoothing: a zero precision at any order gives 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty hypothesis set is undefined")
    tot = sum(bleu_stats(h, r, max_n) for h, r in zip(hypotheses, references))
    c, r = int(tot[0]), int(tot[1])
    matches, totals = tot[2::2], tot[3::2]
    if c == 0 or np.any(matches == 0):
        return 0.0
    log_p = float(np.mean(np.log(matches / totals)))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)
