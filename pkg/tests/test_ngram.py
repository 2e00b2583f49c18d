import gzip
import itertools
import math

import numpy as np
import pytest

from adapterlab.ngram import NGramModel, Smoothing, Tokenizer, encode_corpus, read_corpus, train
from conftest import FIXTURES

TINY = ["a b a c", "b b a", "c a b a b"]


@pytest.fixture
def unigram():
    tok = Tokenizer.build_word(["a a b"], max_vocab=4)
    return tok, train(encode_corpus(tok, ["a a b"]), 1, tok.vocab, Smoothing.add_k(1))


@pytest.fixture
def bigram():
    tok = Tokenizer.build_word(TINY, max_vocab=5)
    return tok, train(encode_corpus(tok, TINY), 2, tok.vocab, tokenizer_mode="word")


class TestWorkedExamples:
    def test_add_one_unigram(self, unigram):
        tok, m = unigram
        assert tok.vocab.tokens == ("a", "b", "<unk>", "</s>")
        np.testing.assert_allclose(m.cond_dist([]).probs, [0.375, 0.25, 0.125, 0.25], atol=1e-12)

    def test_unigram_ignores_context(self, unigram):
        _, m = unigram
        assert m.cond_dist([0, 1, 1]) == m.cond_dist([])

    def test_sequence_logprob(self, unigram):
        tok, m = unigram
        assert m.sequence_logprob(tok.encode("a")) == pytest.approx(math.log(0.375) + math.log(0.25), abs=1e-12)
        assert m.sequence_logprob([]) == pytest.approx(math.log(0.25), abs=1e-12)

    def test_unseen_context_add_k_is_uniform(self):
        tok = Tokenizer.build_word(TINY, max_vocab=5)
        m = train(encode_corpus(tok, TINY), 2, tok.vocab, Smoothing.add_k(1))
        unk = tok.vocab.index()["<unk>"]
        np.testing.assert_allclose(m.cond_dist([unk]).probs, np.full(5, 0.2), atol=1e-15)

    def test_interpolated_by_hand(self, bigram):
        tok, m = bigram
        # after "a": counts b:3 c:1 EOS:1; unigram P1(b) = 0.6 * 5/15 + 0.4 * 0.2
        p1_b = 0.6 * 5 / 15 + 0.4 * 0.2
        assert m.cond_dist(tok.encode("a")).probs[1] == pytest.approx(0.6 * 3 / 5 + 0.4 * p1_b, abs=1e-12)

    def test_interpolated_sees_through_bos(self, bigram):
        tok, m = bigram
        # sequence starts: a, b, c once each
        start = m.cond_dist([]).probs
        p1 = np.array([0.6 * c / 15 + 0.4 * 0.2 for c in (5, 5, 2, 0, 3)])
        expected = 0.4 * p1
        expected[:3] += 0.6 / 3
        np.testing.assert_allclose(start, expected, atol=1e-12)


class TestProperties:
    def test_full_support_and_normalized(self, bigram):
        _, m = bigram
        for ctx in itertools.product(range(5), repeat=2):
            p = m.cond_dist(list(ctx))
            assert p.probs.min() > 0
            assert abs(p.probs.sum() - 1) <= 1e-9

    def test_deterministic(self, bigram):
        tok, m = bigram
        a = m.cond_dist(tok.encode("b a")).logp.tobytes()
        m2 = train(encode_corpus(tok, TINY), 2, tok.vocab, tokenizer_mode="word")
        assert m2.cond_dist(tok.encode("b a")).logp.tobytes() == a

    @pytest.mark.parametrize("order,smoothing", [(1, Smoothing.add_k(1)), (2, Smoothing.add_k(0.5)),
                                                 (2, None), (3, None)])
    def test_tightness_by_enumeration(self, order, smoothing):
        texts = ["a b", "b b a", "c", "a c a"]
        tok = Tokenizer.build_word(texts, max_vocab=4)  # a, b, <unk>, </s>
        m = train(encode_corpus(tok, texts), order, tok.vocab, smoothing)
        words = [i for i in range(len(tok.vocab)) if i != tok.vocab.eos_id]
        total = 0.0
        for length in range(7):
            for seq in itertools.product(words, repeat=length):
                lp = m.sequence_logprob(seq)
                assert lp <= 0.0
                total += math.exp(lp)
        assert total <= 1 + 1e-9

    def test_add_zero_matches_relative_frequencies(self, bigram):
        tok, _ = bigram
        m = train(encode_corpus(tok, TINY), 2, tok.vocab, Smoothing.add_k(0))
        for ctx in ([0], [1], [2], []):
            freq = m.relative_frequencies(ctx)
            assert freq.sum() == pytest.approx(1.0)
            np.testing.assert_allclose(m.cond_dist(ctx).probs, freq, atol=1e-15)

    def test_counts_recoverable(self, bigram):
        _, m = bigram
        assert m.counts([0]) == {1: 3, 2: 1, 4: 1}
        assert m.counts([], order=1) == {0: 5, 1: 5, 2: 2, 4: 3}


class TestErrors:
    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            train([], 2, Tokenizer.bytes().vocab)

    def test_eos_in_training_data(self):
        tok = Tokenizer.bytes()
        with pytest.raises(ValueError):
            train([[65, tok.vocab.eos_id]], 2, tok.vocab)

    def test_order_zero(self):
        with pytest.raises(ValueError):
            train([[1]], 0, Tokenizer.bytes().vocab)

    def test_bad_smoothing(self):
        with pytest.raises(ValueError):
            Smoothing("kneser_ney")
        with pytest.raises(ValueError):
            Smoothing("interpolated", lambdas=(1.5,))


class TestTokenizer:
    @pytest.mark.parametrize("text", ["", "hello world", "naïve café ✓", "tabs\tand\nnewlines  "])
    def test_byte_round_trip(self, text):
        tok = Tokenizer.bytes()
        assert tok.decode(tok.encode(text)) == text
        assert len(tok.vocab) == 257

    def test_unknown_words(self):
        tok = Tokenizer.build_word(["x x y"], max_vocab=4)
        ids = tok.encode("x zebra y")
        assert ids[1] == tok.unk_id
        assert tok.decode(ids) == "x <unk> y"

    def test_vocab_cap_and_order(self):
        tok = Tokenizer.build_word(["c b b a a a"], max_vocab=4)
        assert tok.vocab.tokens == ("a", "b", "<unk>", "</s>")


class TestSerialization:
    def test_golden_dump(self, bigram):
        _, m = bigram
        assert m.dumps() == (FIXTURES / "models" / "tiny_bigram.txt").read_text(encoding="utf-8")

    def test_round_trip(self, bigram, tmp_path):
        _, m = bigram
        path = tmp_path / "m.txt"
        m.save(path)
        m2 = NGramModel.load(path)
        assert (m2.order, m2.vocab, m2.smoothing) == (m.order, m.vocab, m.smoothing)
        for ctx in itertools.product(range(5), repeat=2):
            assert m2.cond_dist(list(ctx)).logp.tobytes() == m.cond_dist(list(ctx)).logp.tobytes()
        assert m2.dumps() == m.dumps()

    def test_add_k_round_trip(self, unigram):
        _, m = unigram
        assert NGramModel.loads(m.dumps()).cond_dist([]) == m.cond_dist([])

    def test_rejects_foreign_file(self):
        with pytest.raises(ValueError):
            NGramModel.loads('{"format": "something-else"}\n')

    def test_read_corpus_gz(self, tmp_path):
        p = tmp_path / "c.txt.gz"
        with gzip.open(p, "wt", encoding="utf-8") as fh:
            fh.write("one two\n\nthree\n")
        assert read_corpus(p) == ["one two", "three"]
