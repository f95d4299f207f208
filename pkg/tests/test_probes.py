import pytest

from specleak.engines import LookaheadConfig
from specleak.errors import ConfigError
from specleak.harness.experiments import probe_phrases
from specleak.lm import SamplerConfig, Vocab, tokenize, train_ngram
from specleak.probes import (LookaheadVictim, ProbeResult, classify_post_key,
                             leak_G, leak_N, run_phrase_session,
                             validate_phrase_set)
from specleak.stream import MitigationPolicy, SessionConfig, serve


class AutoregressiveVictim:
    """Speculation-free target: every iteration emits one token."""

    def __init__(self):
        self.order = 3
        self.alpha = 0.01

    def run(self, corpus_lines, prompt_words, max_tokens):
        words = [w for ln in corpus_lines for w in ln.split()]
        vocab = Vocab.from_words(words)
        model = train_ngram([tokenize(ln, vocab) for ln in corpus_lines],
                            self.order, self.alpha, vocab)
        log = serve(SessionConfig(
            engine="autoregressive", model=model,
            prompt_tokens=tuple(vocab.id_of(w) for w in prompt_words),
            max_tokens=max_tokens, sampler=SamplerConfig(0.0, 0),
            policy=MitigationPolicy.none()))
        return log, vocab


@pytest.fixture(scope="module")
def phrases(data_dir):
    return probe_phrases(data_dir)


class TestLeakN:
    @pytest.mark.parametrize("n", [3, 4, 5, 6, 7, 8])
    def test_recovers_configured_n(self, n):
        victim = LookaheadVictim(LookaheadConfig(n, 3))
        result = leak_N(victim, n_upper_bound=10)
        assert result.conclusive
        assert result.recovered == n
        assert result.confidence > 0.5

    def test_autoregressive_target_inconclusive(self):
        result = leak_N(AutoregressiveVictim(), n_upper_bound=6)
        assert not result.conclusive
        assert result.recovered is None
        assert "multi-token" in result.reason

    def test_evidence_counts_bounded_by_recovered(self):
        victim = LookaheadVictim(LookaheadConfig(5, 3))
        result = leak_N(victim)
        assert max(result.evidence["counts"]) == result.recovered - 1


class TestLeakG:
    @pytest.mark.parametrize("g", [1, 2, 3, 4, 5, 6])
    def test_recovers_configured_g(self, g, phrases):
        victim = LookaheadVictim(LookaheadConfig(4, g))
        result = leak_G(victim, g_upper_bound=6, key_token="run",
                        phrase_set=phrases)
        assert result.conclusive
        assert result.recovered == g

    def test_single_phrase_single_slot_sustained(self, phrases):
        victim = LookaheadVictim(LookaheadConfig(4, 1))
        log, vocab, phrase_len = run_phrase_session(victim, phrases, 1)
        correct, total = classify_post_key(log, vocab, "run", 2 * phrase_len)
        assert total > 0
        assert correct == total

    def test_bound_below_true_g_inconclusive(self, phrases):
        victim = LookaheadVictim(LookaheadConfig(4, 5))
        result = leak_G(victim, g_upper_bound=2, key_token="run",
                        phrase_set=phrases)
        assert not result.conclusive
        assert "transition" in result.reason

    def test_mis_speculation_period_matches_phrase_length(self, phrases):
        victim = LookaheadVictim(LookaheadConfig(4, 3))
        log, vocab, phrase_len = run_phrase_session(victim, phrases, 4)
        assert phrase_len == 7
        steady = 2 * 4 * phrase_len
        positions, pos = [], 0
        for it in log.iterations:
            if len(it.tokens) == 1 and pos >= steady:
                positions.append(pos)
            pos += len(it.tokens)
        gaps = [b - a for a, b in zip(positions, positions[1:])]
        assert len(gaps) >= 8
        # final gap may be clipped by the token budget
        assert all(g == 7 for g in gaps[:-1])


class TestPhraseValidation:
    def test_bundled_phrases_valid(self, phrases):
        assert validate_phrase_set(phrases, "run") == 1

    def test_missing_key_rejected(self):
        with pytest.raises(ConfigError):
            validate_phrase_set([["a", "b"], ["a", "c"]], "zz")

    def test_prefix_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            validate_phrase_set([["we", "run", "x"], ["you", "run", "y"]],
                                "run")

    def test_duplicate_successors_rejected(self):
        with pytest.raises(ConfigError):
            validate_phrase_set([["we", "run", "x", "a"],
                                 ["we", "run", "x", "b"]], "run")

    def test_result_flags(self):
        assert not ProbeResult(recovered=None, confidence=0.0).conclusive
        assert ProbeResult(recovered=4, confidence=1.0).conclusive
