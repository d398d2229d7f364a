from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhicm.data import (ParallelCorpus, TaskSpec, Vocab, batchify, gen_task, lexicon_map, load_data_dir,
                        make_target, swap_pairs, task_vocab, write_corpus)
from dhicm.model import BOS, EOS, PAD, UNK


def test_reserved_ids():
    v = Vocab(["a", "b"])
    assert (v.stoi["<pad>"], v.stoi["<s>"], v.stoi["</s>"], v.stoi["<unk>"]) == (PAD, BOS, EOS, UNK)
    assert v.encode(["a", "zzz"]) == [4, UNK]


@given(st.lists(st.integers(4, 9), max_size=12))
def test_encode_decode_round_trip(ids):
    v = Vocab([f"t{i}" for i in range(6)])
    assert v.encode(v.decode(ids)) == ids
    toks = [f"t{i - 4}" for i in ids]
    assert v.decode(v.encode(toks)) == toks


def test_copy_and_reverse_targets():
    assert make_target("copy", [5, 9, 7]) == [5, 9, 7]
    assert make_target("reverse", [5, 9, 7]) == [7, 9, 5]


def test_lexicon_target_is_mapped_pair_swap():
    spec = TaskSpec("lexicon", vocab_size=8)
    vocab = task_vocab(spec)
    m = lexicon_map(spec, vocab)
    a, b, c, d = (vocab.stoi[f"w{i}"] for i in (1, 5, 2, 7))
    assert make_target("lexicon", [a, b, c, d], m) == [m[b], m[a], m[d], m[c]]
    assert swap_pairs([1, 2, 3, 4, 5]) == [2, 1, 4, 3, 5]
    assert len(set(m.values())) == len(m)  # bijection


@pytest.mark.parametrize("kind", ["copy", "reverse", "lexicon"])
def test_generated_splits_are_disjoint_and_valid(kind):
    spec = TaskSpec(kind, vocab_size=10, min_len=3, max_len=6, size=300, valid_size=50, test_size=50, seed=1)
    data = gen_task(spec)
    sets = {k: {(tuple(s), tuple(t)) for s, t in c.pairs} for k, c in data.splits().items()}
    assert len(sets["train"]) == 300 and len(sets["valid"]) == 50 and len(sets["test"]) == 50
    assert not (sets["train"] & sets["valid"]) and not (sets["train"] & sets["test"]) \
        and not (sets["valid"] & sets["test"])
    for s, t in data.train.pairs:
        assert 3 <= len(s) <= 6 and len(t) == len(s)
        assert min(s + t) >= 4 and max(s + t) < len(data.vocab)


def test_generation_is_deterministic():
    spec = TaskSpec("lexicon", size=100, seed=5)
    assert gen_task(spec).train.pairs == gen_task(spec).train.pairs
    assert gen_task(spec).train.pairs != gen_task(TaskSpec("lexicon", size=100, seed=6)).train.pairs


def test_invalid_spec_errors():
    with pytest.raises(ValueError):
        gen_task(TaskSpec("shuffle"))
    with pytest.raises(ValueError):
        gen_task(TaskSpec("copy", min_len=5, max_len=3))
    with pytest.raises(ValueError):
        TaskSpec("copy", max_len=40).validate(model_max_len=32)


def test_nested_subsets():
    data = gen_task(TaskSpec("copy", size=200))
    assert data.train.subset(50).pairs == data.train.subset(100).pairs[:50]


def test_files_round_trip(tmp_path):
    data = gen_task(TaskSpec("reverse", size=40, valid_size=10, test_size=10))
    for name, corpus in data.splits().items():
        write_corpus(tmp_path, name, corpus, data.vocab)
    data.vocab.save(tmp_path / "vocab.txt")
    back = load_data_dir(tmp_path)
    assert back.train.pairs == data.train.pairs and back.test.pairs == data.test.pairs
    assert (tmp_path / "train.src").read_text().splitlines()[0] == " ".join(data.vocab.decode(data.train.pairs[0][0]))


def test_external_corpus_without_vocab(tmp_path):
    (tmp_path / "train.src").write_text("a b c\nb c\n")
    (tmp_path / "train.tgt").write_text("x y\ny\n")
    d = load_data_dir(tmp_path)
    assert [d.vocab.itos[i] for i in d.train.pairs[0][1]] == ["x", "y"]


# -- batching ----------------------------------------------------------------------

def corpus_of(lengths):
    return ParallelCorpus([(list(range(4, 4 + n)), list(range(4, 4 + n))) for n in lengths])


def test_single_sentence_single_batch_without_extra_padding():
    (b,) = batchify(corpus_of([4]), 100)
    assert b.src.shape == (1, 5) and b.tgt_in.shape == (1, 5)
    assert b.src[0, -1] == EOS and b.tgt_in[0, 0] == BOS and b.tgt_out[0, -1] == EOS
    assert b.src_mask.all() and b.tgt_mask.all()


def test_short_sentences_share_a_batch():
    batches = batchify(corpus_of([3, 9, 3]), 12)
    assert sorted(len(b.index) for b in batches) == [1, 2]
    pair = next(b for b in batches if len(b.index) == 2)
    assert sorted(pair.index.tolist()) == [0, 2]


def test_oversized_sequence_is_an_error():
    with pytest.raises(ValueError, match="max_tokens"):
        batchify(corpus_of([20]), 12)


@given(st.lists(st.integers(1, 12), min_size=1, max_size=40), st.integers(14, 80))
@settings(max_examples=60, deadline=None)
def test_batches_conserve_tokens(lengths, budget):
    rng = np.random.default_rng(len(lengths))
    pairs = [(rng.integers(4, 30, size=n).tolist(), rng.integers(4, 30, size=max(1, n - 1)).tolist())
             for n in lengths]
    corpus = ParallelCorpus(pairs)
    batches = batchify(corpus, budget)
    seen = sorted(i for b in batches for i in b.index.tolist())
    assert seen == list(range(len(pairs)))
    got_src = Counter(int(t) for b in batches for t in b.src[b.src_mask] if t != EOS)
    want_src = Counter(t for s, _ in pairs for t in s)
    assert got_src == want_src
    for b in batches:
        assert b.src.shape[0] * (max(b.src.shape[1], b.tgt_in.shape[1]) + 1) <= budget
        assert np.array_equal(b.src_mask, b.src != PAD)
