import numpy as np
import pytest

from specleak.engines import DecodeIteration, LookaheadConfig
from specleak.errors import PaddingOverflowError, SessionError
from specleak.lm import SamplerConfig, Vocab, tokenize, train_ngram
from specleak.stream import (FailingTransport, InProcessTransport,
                             MitigationPolicy, Packet, SessionConfig,
                             apply_mitigation, frame_iteration, serve)

GREEDY = SamplerConfig(temperature=0.0, seed=0)


@pytest.fixture(scope="module")
def setup():
    docs = ["the cat sat on the mat and the cat sat on the mat again",
            "a dog ran over the hill while a dog ran over the hill fast"]
    vocab = Vocab.from_words(w for d in docs for w in d.split())
    model = train_ngram([tokenize(d, vocab) for d in docs], 3, 0.1, vocab)
    return vocab, model


def session(vocab, model, prompt="the cat", policy=None, max_tokens=24,
            sampler=GREEDY):
    return SessionConfig(engine="lookahead", model=model,
                         prompt_tokens=tuple(tokenize(prompt, vocab)),
                         max_tokens=max_tokens, sampler=sampler,
                         policy=policy or MitigationPolicy.none(),
                         lookahead=LookaheadConfig(4, 3))


def mkpackets(payload_lens):
    return [Packet(seq=i, payload_len=n, pad_len=0, sent_at=float(i + 1),
                   tokens=(0,), payload=b"x" * n)
            for i, n in enumerate(payload_lens)]


class TestFraming:
    def test_payload_len_counts_separators(self, setup):
        vocab, _ = setup
        it = DecodeIteration(0, tuple(tokenize("the cat", vocab)), 0)
        pkt = frame_iteration(it, vocab)
        assert pkt.payload_len == len("the cat".encode("utf-8")) == 7
        assert pkt.pad_len == 0

    def test_single_short_token(self, setup):
        vocab, _ = setup
        it = DecodeIteration(0, (vocab.id_of("a"),), 0)
        assert frame_iteration(it, vocab).payload_len == 1

    def test_session_payloads_match_transcript_growth(self, setup):
        vocab, model = setup
        log = serve(session(vocab, model))
        total = 0
        for i, pkt in enumerate(log.packets):
            total += pkt.payload_len
            # cumulative payload tracks cumulative detokenized text length
            text = " ".join(vocab.word_of(t)
                            for it in log.iterations[:i + 1] for t in it.tokens)
            # payloads omit the i inter-packet joining spaces
            assert total == len(text.encode("utf-8")) - i

    def test_wire_format_header(self):
        pkt = Packet(seq=0, payload_len=3, pad_len=2, sent_at=1.0,
                     payload=b"abc")
        wire = pkt.wire_bytes()
        assert wire[:4] == (5).to_bytes(4, "big")
        assert wire[4:] == b"abc\x00\x00"


class TestConstantPad:
    def test_all_sizes_forced_to_target(self):
        out = apply_mitigation(mkpackets([5, 23, 9]),
                               MitigationPolicy.constant_pad(1024))
        assert [p.observable_size for p in out] == [1024, 1024, 1024]

    def test_overflow_names_packet(self):
        with pytest.raises(PaddingOverflowError, match="seq=1"):
            apply_mitigation(mkpackets([5, 2000]),
                             MitigationPolicy.constant_pad(1024))


class TestVariablePad:
    def test_bounds(self):
        out = apply_mitigation(mkpackets([10] * 200),
                               MitigationPolicy.variable_pad(6, seed=1))
        assert all(10 <= p.observable_size <= 16 for p in out)

    def test_uniformity(self):
        out = apply_mitigation(mkpackets([10] * 10000),
                               MitigationPolicy.variable_pad(6, seed=2))
        pads = np.array([p.pad_len for p in out])
        for eps in range(7):
            assert abs(np.mean(pads == eps) - 1 / 7) < 0.02

    def test_noise_independent_of_payload(self):
        a = apply_mitigation(mkpackets([5, 9, 14, 3]),
                             MitigationPolicy.variable_pad(12, seed=9))
        b = apply_mitigation(mkpackets([40, 2, 7, 31]),
                             MitigationPolicy.variable_pad(12, seed=9))
        assert [p.pad_len for p in a] == [p.pad_len for p in b]


class TestAggregate:
    def test_partition_sums(self):
        out = apply_mitigation(mkpackets([3, 4, 2, 5, 1]),
                               MitigationPolicy.aggregate(3))
        assert [p.observable_size for p in out] == [9, 6]
        assert [p.seq for p in out] == [0, 1]

    def test_composition_aggregate_then_pad(self):
        policy = MitigationPolicy.aggregate_then_pad(
            2, MitigationPolicy.constant_pad(64))
        out = apply_mitigation(mkpackets([3, 4, 2]), policy)
        assert [p.observable_size for p in out] == [64, 64]
        assert [p.payload_len for p in out] == [7, 2]


class TestServe:
    def test_policy_none_packet_per_iteration(self, setup):
        vocab, model = setup
        log = serve(session(vocab, model))
        assert len(log.packets) == len(log.iterations)
        assert [p.seq for p in log.packets] == list(range(len(log.packets)))

    def test_aggregate_packet_count(self, setup):
        vocab, model = setup
        k = 3
        log = serve(session(vocab, model,
                            policy=MitigationPolicy.aggregate(k)))
        assert len(log.packets) == -(-len(log.iterations) // k)

    def test_token_counts_rederivable_from_payloads(self, setup):
        vocab, model = setup
        log = serve(session(vocab, model))
        for it, pkt in zip(log.iterations, log.packets):
            words = pkt.payload.decode("utf-8").split(" ")
            assert len(words) == len(it.tokens)

    def test_mitigation_preserves_transcript(self, setup):
        vocab, model = setup
        base = serve(session(vocab, model))
        for policy in (MitigationPolicy.constant_pad(1024),
                       MitigationPolicy.variable_pad(24, seed=4),
                       MitigationPolicy.aggregate(5)):
            log = serve(session(vocab, model, policy=policy))
            assert log.transcript(vocab) == base.transcript(vocab)

    def test_constant_pad_overhead_direction(self, setup):
        vocab, model = setup
        log = serve(session(vocab, model,
                            policy=MitigationPolicy.constant_pad(1024)))
        assert log.overhead_vs_unpadded() > 50

    def test_transport_failure_preserves_partial_log(self, setup):
        vocab, model = setup
        transport = FailingTransport(fail_after=2)
        with pytest.raises(SessionError) as exc_info:
            serve(session(vocab, model), transport=transport)
        partial = exc_info.value.partial_log
        assert partial is not None
        assert len(partial.packets) == 2

    def test_simulated_clock_ticks(self, setup):
        vocab, model = setup
        log = serve(session(vocab, model))
        assert [p.sent_at for p in log.packets] == [
            float(i + 1) for i in range(len(log.packets))]


class TestTransportObservability:
    def test_observer_sees_only_time_and_length(self, setup):
        vocab, model = setup
        transport = InProcessTransport()
        log = serve(session(vocab, model,
                            policy=MitigationPolicy.variable_pad(8, seed=3)),
                    transport=transport)
        obs = transport.observations()
        assert [size for _, size in obs] == [p.observable_size
                                             for p in log.packets]
        assert all(isinstance(t, float) and isinstance(s, int)
                   for t, s in obs)
