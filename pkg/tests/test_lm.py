import numpy as np
import pytest

from specleak import lm
from specleak.errors import CorpusError, UnknownWordError
from specleak.lm import (BOS_ID, EOS_ID, UNK_ID, SamplerConfig,
                         TokenSampler, Vocab, detokenize, load_corpus,
                         load_model, save_model, tokenize, train_ngram)


def make_vocab(*words):
    return Vocab.from_words(words)


def train_on(text_docs, order, alpha):
    vocab = Vocab.from_words(w for doc in text_docs for w in doc.split())
    corpus = [tokenize(doc, vocab) for doc in text_docs]
    return vocab, train_ngram(corpus, order, alpha, vocab)


class TestVocab:
    def test_reserved_ids_fixed(self):
        v = make_vocab("zeta", "alpha")
        assert v.entries[BOS_ID] == lm.BOS
        assert v.entries[EOS_ID] == lm.EOS
        assert v.entries[UNK_ID] == lm.UNK

    def test_bijection_dense(self):
        v = make_vocab("b", "a", "c", "a")
        assert len(set(v.entries)) == len(v.entries)
        for i, w in enumerate(v.entries):
            assert v.index[w] == i


class TestTokenize:
    def test_empty_input(self):
        v = make_vocab("a")
        assert tokenize("", v) == []

    def test_repetition(self):
        v = make_vocab("a")
        a = v.id_of("a")
        assert tokenize("a a a", v) == [a, a, a]

    def test_unknown_word_errors_with_name(self):
        v = make_vocab("a")
        with pytest.raises(UnknownWordError, match="mystery"):
            tokenize("a mystery", v)

    def test_unk_policy(self):
        v = make_vocab("a")
        assert tokenize("a mystery", v, allow_unknown=True) == [v.id_of("a"), UNK_ID]

    def test_round_trip_50_word_line(self):
        words = [f"w{i}" for i in range(25)]
        line = "  " + "   ".join(words + words) + " "
        v = Vocab.from_words(words)
        normalized = " ".join(line.split())
        assert detokenize(tokenize(line, v), v) == normalized


class TestTrain:
    def test_bigram_hand_count(self):
        # corpus "a b a b": count(a->b)=2, total after "a"=2
        vocab, model = train_on(["a b a b"], order=2, alpha=0.5)
        V = len(vocab)
        dist = model.next_distribution([vocab.id_of("a")])
        assert dist[vocab.id_of("b")] == pytest.approx((2 + 0.5) / (2 + 0.5 * V))

    def test_order_one_is_unigram(self):
        vocab, model = train_on(["a a b"], order=1, alpha=0.1)
        dist = model.next_distribution([])
        # frequencies: a=2, b=1, eos=1; totals=4
        V = len(vocab)
        assert dist[vocab.id_of("a")] == pytest.approx((2 + 0.1) / (4 + 0.1 * V))
        assert dist[vocab.id_of("b")] == pytest.approx((1 + 0.1) / (4 + 0.1 * V))

    def test_alpha_limit_matches_empirical_frequencies(self):
        doc = "x y x z x y"
        vocab, model = train_on([doc], order=2, alpha=1e-9)
        # brute-force bigram counts from the padded document
        ids = tokenize(doc, vocab) + [EOS_ID]
        padded = [BOS_ID] + ids
        x = vocab.id_of("x")
        followers = [padded[i + 1] for i in range(len(padded) - 1) if padded[i] == x]
        dist = model.next_distribution([x])
        for tok in set(followers):
            want = followers.count(tok) / len(followers)
            assert dist[tok] == pytest.approx(want, abs=1e-6)

    def test_empty_corpus_errors(self):
        v = make_vocab("a")
        with pytest.raises(CorpusError):
            train_ngram([], 2, 0.1, v)


class TestNextDistribution:
    def test_unseen_context_is_uniform(self):
        vocab, model = train_on(["a b"], order=3, alpha=0.1)
        dist = model.next_distribution([vocab.id_of("b"), vocab.id_of("b")])
        assert np.allclose(dist, 1.0 / len(vocab))

    def test_normalization(self):
        vocab, model = train_on(["a b a c a b"], order=2, alpha=0.3)
        for ctx in ([], [vocab.id_of("a")], [vocab.id_of("c")], [999 % len(vocab)]):
            assert abs(model.next_distribution(ctx).sum() - 1.0) < 1e-9

    def test_mode_after_a_is_b(self):
        vocab, model = train_on(["a b a b"], order=2, alpha=0.1)
        dist = model.next_distribution([vocab.id_of("a")])
        assert int(np.argmax(dist)) == vocab.id_of("b")

    def test_markov_window(self):
        vocab, model = train_on(["a b c a b d"], order=3, alpha=0.2)
        tail = [vocab.id_of("a"), vocab.id_of("b")]
        long_ctx = [vocab.id_of("d"), vocab.id_of("c")] * 7 + tail
        assert np.array_equal(model.next_distribution(tail),
                              model.next_distribution(long_ctx))

    def test_short_context_bos_padded(self):
        vocab, model = train_on(["a b"], order=3, alpha=0.1)
        assert np.array_equal(
            model.next_distribution([vocab.id_of("a")]),
            model.next_distribution([BOS_ID, vocab.id_of("a")]))


class TestSample:
    def test_temperature_zero_argmax(self):
        s = TokenSampler(SamplerConfig(temperature=0.0, seed=1))
        assert s.draw(np.array([0.1, 0.7, 0.2])) == 1

    def test_temperature_zero_tie_breaks_low(self):
        s = TokenSampler(SamplerConfig(temperature=0.0, seed=1))
        assert s.draw(np.array([0.5, 0.5])) == 0

    def test_seeded_draws_reproducible(self):
        dist = np.array([0.2, 0.5, 0.3])
        a = TokenSampler(SamplerConfig(temperature=0.9, seed=42))
        b = TokenSampler(SamplerConfig(temperature=0.9, seed=42))
        assert [a.draw(dist) for _ in range(50)] == [b.draw(dist) for _ in range(50)]

    def test_tempered_frequencies_match_analytic(self):
        dist = np.array([0.1, 0.6, 0.25, 0.05])
        t = 0.8
        tempered = dist ** (1 / t)
        tempered /= tempered.sum()
        s = TokenSampler(SamplerConfig(temperature=t, seed=7))
        draws = np.array([s.draw(dist) for _ in range(1000)])
        for tok in range(4):
            freq = np.mean(draws == tok)
            assert abs(freq - tempered[tok]) < 0.05


class TestPersistence:
    def test_round_trip_distributions(self, tmp_path):
        vocab, model = train_on(
            ["a b c d e", "b c d a a", "e d c b a"], order=3, alpha=0.15)
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.order == model.order
        assert loaded.vocab.entries == model.vocab.entries
        rng = np.random.Generator(np.random.Philox(5))
        for _ in range(100):
            ctx = [int(rng.integers(0, len(vocab))) for _ in range(2)]
            assert np.array_equal(model.next_distribution(ctx),
                                  loaded.next_distribution(ctx))

    def test_bad_format_rejected(self, tmp_path):
        path = tmp_path / "bogus.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(CorpusError):
            load_model(path)


class TestCorpusLoading:
    def test_one_document_per_line(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text("a b c\n\nd e f\n", encoding="utf-8")
        vocab, docs = load_corpus(path)
        assert len(docs) == 2
        assert detokenize(docs[1], vocab) == "d e f"

    def test_empty_file_errors(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("\n \n", encoding="utf-8")
        with pytest.raises(CorpusError):
            load_corpus(path)

    def test_unknown_word_reports_line(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text("a b\nc d\n", encoding="utf-8")
        vocab = make_vocab("a", "b", "c")
        with pytest.raises(CorpusError, match=":2:"):
            load_corpus(path, vocab=vocab)


class TestDeterminism:
    def test_identical_setup_identical_chain(self):
        docs = ["p q r s p q", "r s p q r s"]
        _, m1 = train_on(docs, order=3, alpha=0.1)
        vocab, m2 = train_on(docs, order=3, alpha=0.1)
        cfg = SamplerConfig(temperature=0.7, seed=99)
        s1, s2 = TokenSampler(cfg), TokenSampler(cfg)
        ctx1 = [vocab.id_of("p")]
        ctx2 = [vocab.id_of("p")]
        for _ in range(30):
            t1 = s1.draw(m1.next_distribution(ctx1))
            t2 = s2.draw(m2.next_distribution(ctx2))
            assert t1 == t2
            ctx1.append(t1)
            ctx2.append(t2)
