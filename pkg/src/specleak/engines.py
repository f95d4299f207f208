"""Speculative decoding engines emitting per-iteration token groups.

Four session types share one contract: a list of DecodeIteration whose
concatenated tokens form the session output. The variation in tokens per
iteration is the observable the rest of the testbed attacks and defends.

Engines verify drafts greedily (temperature 0) even when emission sampling
is tempered: acceptance stays deterministic, and the sampling temperature
only perturbs corrective/fresh tokens. Generation stops at EOS (never
emitted) or when ``max_tokens`` have been produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lm import EOS_ID, NGramModel, SamplerConfig, TokenSampler


@dataclass(frozen=True)
class DecodeIteration:
    """One verification/generation step; the unit streamed per packet."""

    index: int
    tokens: tuple[int, ...]
    speculated_accepted: int

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("iteration must emit at least one token")
        if not 0 <= self.speculated_accepted <= len(self.tokens):
            raise ValueError("speculated_accepted out of range")


@dataclass(frozen=True)
class LookaheadConfig:
    """Self-drafting cache geometry: gram size N, guess-set size G."""

    ngram_size: int = 5
    guess_set_size: int = 3

    def __post_init__(self):
        if self.ngram_size < 2:
            raise ValueError("ngram_size must be >= 2")
        if self.guess_set_size < 1:
            raise ValueError("guess_set_size must be >= 1")


class LookaheadCache:
    """key token -> up to G candidate (N-1)-grams, least-recently-used out.

    Re-inserting a gram refreshes its recency instead of duplicating it.
    """

    def __init__(self, guess_set_size: int):
        if guess_set_size < 1:
            raise ValueError("guess_set_size must be >= 1")
        self.guess_set_size = guess_set_size
        self._map: dict[int, list[tuple[int, ...]]] = {}

    def insert(self, key: int, gram: tuple[int, ...]) -> None:
        grams = self._map.setdefault(key, [])
        if gram in grams:
            grams.remove(gram)
        grams.append(gram)
        if len(grams) > self.guess_set_size:
            grams.pop(0)

    def candidates(self, key: int) -> list[tuple[int, ...]]:
        """Candidates for a key, most recent first."""
        return list(reversed(self._map.get(key, [])))

    def __contains__(self, key: int) -> bool:
        return key in self._map


@dataclass(frozen=True)
class RetrievalParams:
    max_match_len: int = 4
    top_k: int = 3
    draft_len: int = 3

    def __post_init__(self):
        if self.max_match_len < 1 or self.top_k < 1 or self.draft_len < 1:
            raise ValueError("retrieval parameters must be >= 1")


class RetrievalDatastore:
    """Token sequences indexed for longest-suffix-of-context retrieval.

    Every retrievable continuation is a verbatim slice of a stored
    sequence, which is what makes the extraction attack sound.
    """

    def __init__(self, sequences: list[list[int]], params: RetrievalParams):
        self.sequences = [tuple(s) for s in sequences]
        self.params = params
        # n-gram -> occurrence list in scan order, n in 1..max_match_len
        self._index: dict[tuple[int, ...], list[tuple[int, int]]] = {}
        for si, seq in enumerate(self.sequences):
            for pos in range(len(seq)):
                for n in range(1, params.max_match_len + 1):
                    if pos + n > len(seq):
                        break
                    self._index.setdefault(seq[pos:pos + n], []).append((si, pos))

    def __len__(self) -> int:
        return len(self.sequences)

    def retrieve(self, context, draft_len: int | None = None) -> list[tuple[int, ...]]:
        """Top-k draft continuations for the longest matching context suffix.

        Continuations are ranked by occurrence frequency, then by first
        occurrence in scan order, so retrieval is deterministic.
        """
        p = self.params
        if draft_len is None:
            draft_len = p.draft_len
        ctx = tuple(context)
        for n in range(min(p.max_match_len, len(ctx)), 0, -1):
            suffix = ctx[len(ctx) - n:]
            occurrences = self._index.get(suffix)
            if not occurrences:
                continue
            ranked: dict[tuple[int, ...], list[int]] = {}
            for order, (si, pos) in enumerate(occurrences):
                seq = self.sequences[si]
                cont = seq[pos + n:pos + n + draft_len]
                if not cont:
                    continue
                stats = ranked.setdefault(cont, [0, order])
                stats[0] += 1
            if not ranked:
                continue
            drafts = sorted(ranked.items(), key=lambda kv: (-kv[1][0], kv[1][1]))
            return [d for d, _ in drafts[:p.top_k]]
        return []


@dataclass(frozen=True)
class DraftPairConfig:
    """Small draft model plus fallback/rollback acceptance thresholds."""

    draft_model: NGramModel
    draft_len: int = 4
    fallback_threshold: float = 0.2
    rollback_threshold: float = 4.0

    def __post_init__(self):
        if self.draft_len < 1:
            raise ValueError("draft_len must be >= 1")
        if not 0 < self.fallback_threshold <= 1:
            raise ValueError("fallback_threshold must be in (0, 1]")
        if self.rollback_threshold <= 0:
            raise ValueError("rollback_threshold must be > 0")


def verify_greedy(target: NGramModel, context, draft) -> int:
    """Length of the longest draft prefix matching the target's argmax chain."""
    ctx = list(context)
    accepted = 0
    for tok in draft:
        if target.greedy_next(ctx) != tok:
            break
        ctx.append(tok)
        accepted += 1
    return accepted


class _Emitter:
    """Shared bookkeeping: EOS truncation, budget, iteration assembly."""

    def __init__(self, prompt, max_tokens: int, model: NGramModel,
                 cfg: SamplerConfig):
        if max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        self.context = list(prompt)
        self.max_tokens = max_tokens
        self.model = model
        self.sampler = TokenSampler(cfg)
        self.iterations: list[DecodeIteration] = []
        self.emitted = 0
        self.done = False

    @property
    def remaining(self) -> int:
        return self.max_tokens - self.emitted

    def fresh_token(self) -> int:
        if self.sampler.cfg.temperature == 0:
            return self.model.greedy_next(self.context)
        return self.sampler.draw(self.model.next_distribution(self.context))

    def emit(self, tokens: list[int], speculated_accepted: int) -> None:
        if EOS_ID in tokens:
            cut = tokens.index(EOS_ID)
            tokens = tokens[:cut]
            speculated_accepted = min(speculated_accepted, len(tokens))
            self.done = True
        if tokens:
            self.iterations.append(DecodeIteration(
                index=len(self.iterations),
                tokens=tuple(tokens),
                speculated_accepted=speculated_accepted,
            ))
            self.context.extend(tokens)
            self.emitted += len(tokens)
        if self.emitted >= self.max_tokens:
            self.done = True

    def emit_matched_plus_fresh(self, matched: list[int], accepted: int) -> None:
        """Emit an accepted prefix plus one freshly generated token."""
        self.context.extend(matched)
        fresh = self.fresh_token()
        del self.context[len(self.context) - len(matched):]
        self.emit(matched + [fresh], accepted)


def decode_autoregressive(model: NGramModel, prompt, max_tokens: int,
                          cfg: SamplerConfig) -> list[DecodeIteration]:
    """Baseline: one token per iteration, no speculation."""
    em = _Emitter(prompt, max_tokens, model, cfg)
    while not em.done:
        em.emit([em.fresh_token()], 0)
    return em.iterations


def decode_lookahead(model: NGramModel, prompt, max_tokens: int,
                     lookahead_cfg: LookaheadConfig,
                     cfg: SamplerConfig) -> list[DecodeIteration]:
    """Self-drafting engine: speculate from an LRU cache of seen n-grams.

    Per iteration: query the cache with the last emitted (or last prompt)
    token, verify each candidate gram greedily, and take the best. A fully
    accepted gram is emitted as-is (N-1 tokens); otherwise the matched
    prefix plus one fresh token is emitted. The cache is then refreshed
    from the realized output stream, one insert per newly completed
    (key, following (N-1)-gram) position.
    """
    n = lookahead_cfg.ngram_size
    prompt = list(prompt)
    cache = LookaheadCache(lookahead_cfg.guess_set_size)
    em = _Emitter(prompt, max_tokens, model, cfg)
    stream: list[int] = []
    next_update_pos = 0

    while not em.done:
        key = stream[-1] if stream else (prompt[-1] if prompt else None)
        gram_cap = min(n - 1, em.remaining)
        best: tuple[int, ...] = ()
        best_len = 0
        if key is not None:
            for cand in cache.candidates(key):
                cand = cand[:gram_cap]
                accepted = verify_greedy(model, em.context, cand)
                if accepted > best_len:
                    best_len, best = accepted, cand
        if best_len == gram_cap and best_len > 0:
            em.emit(list(best), best_len)
        else:
            em.emit_matched_plus_fresh(list(best[:best_len]), best_len)

        stream = em.context[len(prompt):]
        while next_update_pos + n - 1 <= len(stream) - 1:
            p = next_update_pos
            cache.insert(stream[p], tuple(stream[p + 1:p + n]))
            next_update_pos += 1
    return em.iterations


def decode_retrieval(model: NGramModel, prompt, max_tokens: int,
                     store: RetrievalDatastore,
                     cfg: SamplerConfig) -> list[DecodeIteration]:
    """Retrieval engine: drafts are verbatim continuations from the store.

    Each iteration retrieves top-k drafts for the longest context suffix,
    verifies them greedily, and emits the best accepted prefix plus one
    corrective token (or a single token when nothing matches).
    """
    em = _Emitter(prompt, max_tokens, model, cfg)
    while not em.done:
        draft_cap = min(store.params.draft_len, max(em.remaining - 1, 0))
        drafts = store.retrieve(em.context, draft_cap) if draft_cap else []
        best: tuple[int, ...] = ()
        best_len = 0
        for cand in drafts:
            accepted = verify_greedy(model, em.context, cand)
            if accepted > best_len:
                best_len, best = accepted, cand
        em.emit_matched_plus_fresh(list(best[:best_len]), best_len)
    return em.iterations


def decode_draft_pair(model: NGramModel, prompt, max_tokens: int,
                      pair_cfg: DraftPairConfig,
                      cfg: SamplerConfig) -> list[DecodeIteration]:
    """Draft-model engine with fallback and rollback policies.

    The draft model proposes greedy tokens until its confidence (max
    next-token probability) drops below the fallback threshold or the
    burst limit is hit. The target accepts the prefix whose per-token
    cross-entropy stays within the rollback threshold, then appends one
    target token.
    """
    em = _Emitter(prompt, max_tokens, model, cfg)
    draft = pair_cfg.draft_model
    while not em.done:
        burst_cap = min(pair_cfg.draft_len, max(em.remaining - 1, 0))
        burst: list[int] = []
        dctx = list(em.context)
        for _ in range(burst_cap):
            dist = draft.next_distribution(dctx)
            if float(np.max(dist)) < pair_cfg.fallback_threshold:
                break
            tok = int(np.argmax(dist))
            burst.append(tok)
            dctx.append(tok)

        accepted = 0
        vctx = list(em.context)
        for tok in burst:
            p = float(model.next_distribution(vctx)[tok])
            if -np.log(p) > pair_cfg.rollback_threshold:
                break
            vctx.append(tok)
            accepted += 1

        em.emit_matched_plus_fresh(burst[:accepted], accepted)
    return em.iterations


def output_tokens(iterations: list[DecodeIteration]) -> list[int]:
    """Concatenated session output."""
    return [t for it in iterations for t in it.tokens]
