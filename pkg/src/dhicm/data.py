"""Synthetic parallel corpora, vocabularies, corpus files and token batching."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import derive_rng
from .model import BOS, EOS, PAD, UNK

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
TASKS = ("copy", "reverse", "lexicon")


class Vocab:
    """Token <-> id bijection with pad=0, bos=1, eos=2, unk=3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[len(RESERVED):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(t for t in Path(path).read_text(encoding="utf-8").split("\n") if t)


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 32          # content tokens (reserved ids come on top)
    min_len: int = 3
    max_len: int = 10
    size: int = 2000              # training pairs
    valid_size: int = 200
    test_size: int = 200
    seed: int = 0

    def validate(self, model_max_len: Optional[int] = None) -> "TaskSpec":
        if self.kind not in TASKS:
            raise ValueError(f"unknown task kind {self.kind!r}; choose from {TASKS}")
        if self.size < 1 or self.valid_size < 0 or self.test_size < 0:
            raise ValueError("split sizes must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.vocab_size < 2:
            raise ValueError("need at least 2 content tokens")
        if model_max_len is not None and self.max_len > model_max_len:
            raise ValueError(f"max_len {self.max_len} exceeds model max_len {model_max_len}")
        return self


@dataclass
class ParallelCorpus:
    pairs: list[tuple[list[int], list[int]]]
    split: str = "train"
    spec: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, n: int) -> "ParallelCorpus":
        """First ``n`` pairs; prefixes of one draw give nested size sweeps."""
        if n > len(self.pairs):
            raise ValueError(f"requested {n} pairs from a corpus of {len(self.pairs)}")
        return ParallelCorpus(self.pairs[:n], self.split, dict(self.spec, size=n))

    def digest(self) -> str:
        h = hashlib.sha256()
        for s, t in self.pairs:
            h.update(json.dumps([s, t]).encode())
        return h.hexdigest()[:16]


@dataclass
class TaskData:
    vocab: Vocab
    train: ParallelCorpus
    valid: ParallelCorpus
    test: ParallelCorpus
    spec: TaskSpec

    def splits(self) -> dict[str, ParallelCorpus]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


def task_vocab(spec: TaskSpec) -> Vocab:
    toks = [f"w{i}" for i in range(spec.vocab_size)]
    if spec.kind == "lexicon":
        toks += [f"v{i}" for i in range(spec.vocab_size)]
    return Vocab(toks)


def swap_pairs(seq: Sequence) -> list:
    """Swap adjacent elements: [a, b, c, d, e] -> [b, a, d, c, e]."""
    out = list(seq)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def lexicon_map(spec: TaskSpec, vocab: Vocab) -> dict[int, int]:
    perm = derive_rng(spec.seed, "lexicon", "map").permutation(spec.vocab_size)
    return {vocab.stoi[f"w{i}"]: vocab.stoi[f"v{j}"] for i, j in enumerate(perm)}


def make_target(kind: str, src: Sequence[int], mapping: Optional[dict] = None) -> list[int]:
    if kind == "copy":
        return list(src)
    if kind == "reverse":
        return list(reversed(src))
    if kind == "lexicon":
        return [mapping[t] for t in swap_pairs(src)]
    raise ValueError(f"unknown task kind {kind!r}")


def gen_task(spec: TaskSpec) -> TaskData:
    """Train/valid/test corpora for ``spec``; deterministic in ``spec``.

    Each split draws from its own labelled RNG stream; test is drawn first,
    then valid, then train, and any source already drawn (in this or an
    earlier split) is redrawn, so pairs are unique and splits are disjoint.
    """
    spec.validate()
    vocab = task_vocab(spec)
    mapping = lexicon_map(spec, vocab) if spec.kind == "lexicon" else None
    content = np.array([vocab.stoi[f"w{i}"] for i in range(spec.vocab_size)])
    seen: set[tuple] = set()
    out = {}
    for split, n in (("test", spec.test_size), ("valid", spec.valid_size), ("train", spec.size)):
        rng = derive_rng(spec.seed, spec.kind, split)
        pairs: list[tuple[list[int], list[int]]] = []
        mine: set[tuple] = set()
        attempts = 0
        while len(pairs) < n:
            attempts += 1
            if attempts > 50 * n + 1000:
                raise ValueError("task space too small for the requested disjoint split sizes")
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            src = [int(t) for t in content[rng.integers(0, len(content), size=length)]]
            key = tuple(src)
            if key in seen or key in mine:
                continue
            mine.add(key)
            pairs.append((src, make_target(spec.kind, src, mapping)))
        seen |= mine
        out[split] = ParallelCorpus(pairs, split, asdict(spec))
    return TaskData(vocab, out["train"], out["valid"], out["test"], spec)


# -- files ----------------------------------------------------------------------

def write_corpus(directory, name: str, corpus: ParallelCorpus, vocab: Vocab) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for side, ext in ((0, "src"), (1, "tgt")):
        lines = [" ".join(vocab.decode(pair[side], strip=False)) for pair in corpus.pairs]
        (d / f"{name}.{ext}").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_lines(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    return [line.split() for line in text.split("\n") if line.strip()]


def read_corpus(directory, name: str, vocab: Vocab, split: Optional[str] = None) -> ParallelCorpus:
    d = Path(directory)
    src, tgt = read_lines(d / f"{name}.src"), read_lines(d / f"{name}.tgt")
    if len(src) != len(tgt):
        raise ValueError(f"{name}: {len(src)} source lines but {len(tgt)} target lines")
    pairs = [(vocab.encode(s), vocab.encode(t)) for s, t in zip(src, tgt)]
    return ParallelCorpus(pairs, split or name, {"file": str(d / name)})


def load_data_dir(directory, train_name: str = "train") -> TaskData:
    """Load ``<name>.src/.tgt`` files; builds a vocabulary if none is saved."""
    d = Path(directory)
    if (d / "vocab.txt").exists():
        vocab = Vocab.load(d / "vocab.txt")
    else:
        vocab = Vocab()
        for name in (train_name, "valid", "test"):
            for ext in ("src", "tgt"):
                if (d / f"{name}.{ext}").exists():
                    for line in read_lines(d / f"{name}.{ext}"):
                        for tok in line:
                            vocab.add(tok)
    spec = TaskSpec(**json.loads((d / "task.json").read_text())) if (d / "task.json").exists() else TaskSpec()
    splits = {}
    for split, name in (("train", train_name), ("valid", "valid"), ("test", "test")):
        if (d / f"{name}.src").exists():
            splits[split] = read_corpus(d, name, vocab, split)
        else:
            splits[split] = ParallelCorpus([], split)
    return TaskData(vocab, splits["train"], splits["valid"], splits["test"], spec)


# -- batching -----------------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray       # [B, N]  tokens + eos, pad-filled
    tgt_in: np.ndarray    # [B, M]  bos + tokens
    tgt_out: np.ndarray   # [B, M]  tokens + eos
    src_mask: np.ndarray  # True = real token
    tgt_mask: np.ndarray
    index: np.ndarray     # corpus positions of the rows

    @property
    def ntokens(self) -> int:
        return int(self.tgt_mask.sum())


def collate(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], index=None) -> Batch:
    B = len(pairs)
    N = max(len(s) for s, _ in pairs) + 1
    M = max(len(t) for _, t in pairs) + 1
    src = np.full((B, N), PAD, dtype=np.int64)
    tgt_in = np.full((B, M), PAD, dtype=np.int64)
    tgt_out = np.full((B, M), PAD, dtype=np.int64)
    for b, (s, t) in enumerate(pairs):
        src[b, : len(s)] = s
        src[b, len(s)] = EOS
        tgt_in[b, 0] = BOS
        tgt_in[b, 1: len(t) + 1] = t
        tgt_out[b, : len(t)] = t
        tgt_out[b, len(t)] = EOS
    idx = np.arange(B) if index is None else np.asarray(index)
    return Batch(src, tgt_in, tgt_out, src != PAD, tgt_out != PAD, idx)


def _frame_len(pair) -> int:
    return max(len(pair[0]), len(pair[1])) + 2


def batchify(corpus: ParallelCorpus, max_tokens: int) -> list[Batch]:
    """Length-sorted greedy packing under a padded-token budget.

    A batch of ``B`` rows whose longest side has length ``L`` costs
    ``B * (L + 2)`` (bos/eos framing included).
    """
    if not corpus.pairs:
        return []
    order = sorted(range(len(corpus)), key=lambda i: (_frame_len(corpus.pairs[i]), len(corpus.pairs[i][0]), i))
    longest = _frame_len(corpus.pairs[order[-1]])
    if longest > max_tokens:
        raise ValueError(f"a sequence needs {longest} tokens with framing, above max_tokens={max_tokens}")
    batches, current, width = [], [], 0
    for i in order:
        w = max(width, _frame_len(corpus.pairs[i]))
        if current and w * (len(current) + 1) > max_tokens:
            batches.append(current)
            current, w = [], _frame_len(corpus.pairs[i])
        current.append(i)
        width = w
    batches.append(current)
    return [collate([corpus.pairs[i] for i in b], b) for b in batches]
