"""Datastore leakage against the retrieval engine.

A malicious user watches per-iteration token counts: any block of
correctly speculated tokens must exist verbatim in the datastore, so each
multi-token iteration leaks a (preceding token, accepted block) pair.
Three prompting strategies drive the leakage; reusing leaked material is
its own amplifier, since a leaked block is a guaranteed retrieval hit
that extends deeper into the stored sequence.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MitigatedSessionError
from .stream import SessionLog

LeakedPair = tuple[int, tuple[int, ...]]  # (preceding token, accepted block)

STRATEGIES = ("random", "common-words", "feedback-reuse")


@dataclass(frozen=True)
class ExtractionStrategy:
    """Prompt-construction policy for the attack queries."""

    variant: str
    query_budget: int = 1000
    tokens_per_query: int = 8

    def __post_init__(self):
        if self.variant not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.variant!r}; "
                              f"expected one of {STRATEGIES}")
        if self.query_budget < 1:
            raise ConfigError("query budget must be >= 1")
        if self.tokens_per_query < 1:
            raise ConfigError("tokens_per_query must be >= 1")


@dataclass
class LeakLedger:
    """Unique leaked pairs plus the cumulative-discovery timeline."""

    leaked: dict[LeakedPair, int] = field(default_factory=dict)  # first query
    timeline: list[tuple[int, int]] = field(default_factory=list)

    def record(self, pairs, query_index: int) -> None:
        for pair in pairs:
            self.leaked.setdefault(pair, query_index)
        self.timeline.append((query_index + 1, len(self.leaked)))

    def unique_count(self) -> int:
        return len(self.leaked)


def detect_leaks(log: SessionLog) -> set[LeakedPair]:
    """Leaked (preceding token, accepted block) pairs from one session.

    Requires an unmitigated retrieval session; padding or aggregation
    hides the per-iteration counts this attack reads.
    """
    if not log.policy.is_none:
        raise MitigatedSessionError(
            "extraction needs per-iteration token counts; session used "
            f"policy {log.policy.variant!r}")
    if log.engine != "retrieval":
        raise ConfigError("extraction targets the retrieval engine, got "
                          f"{log.engine!r}")
    leaks: set[LeakedPair] = set()
    context = list(log.prompt_tokens)
    for it in log.iterations:
        if it.speculated_accepted >= 1 and context:
            block = tuple(it.tokens[:it.speculated_accepted])
            leaks.add((context[-1], block))
        context.extend(it.tokens)
    return leaks


class QueryState:
    """Mutable per-run strategy state: rng, wordlist, leak pool.

    The reuse pool holds frontier pairs in round-robin order. An entry
    whose reuse stops producing new leaks is retired; a fully retired
    pool behaves like an empty one, so the strategy falls back to
    common-words exploration until a fresh entry point leaks.
    """

    def __init__(self, vocab_ids: list[int], weighted_words, seed: int):
        if not vocab_ids:
            raise ConfigError("empty candidate vocabulary")
        self.vocab_ids = vocab_ids
        self.word_ids = np.array([w for w, _ in weighted_words])
        weights = np.array([max(w, 0.0) for _, w in weighted_words], dtype=float)
        if weights.sum() <= 0:
            raise ConfigError("wordlist weights must be positive")
        self.word_probs = weights / weights.sum()
        self.rng = np.random.Generator(np.random.Philox(seed))
        self.pool: list[LeakedPair] = []
        self.last_used: LeakedPair | None = None
        self._known: set[LeakedPair] = set()
        self._pool_cursor = 0

    def next_pool_entry(self) -> LeakedPair | None:
        if not self.pool:
            self.last_used = None
            return None
        entry = self.pool[self._pool_cursor % len(self.pool)]
        self._pool_cursor += 1
        self.last_used = entry
        return entry

    def absorb(self, pairs) -> None:
        for pair in sorted(pairs):
            if pair not in self._known:
                self._known.add(pair)
                self.pool.append(pair)

    def retire(self, entry: LeakedPair) -> None:
        if entry in self.pool:
            self.pool.remove(entry)


def build_query(strategy: ExtractionStrategy, state: QueryState) -> list[int]:
    """One attack prompt as token ids.

    random: uniform draws over the vocabulary. common-words: draws from
    the frequency-ranked wordlist, weighted by its frequencies.
    feedback-reuse: a leaked pair, round-robin, placed verbatim at the
    prompt tail (falls back to common words while the pool is empty).
    """
    n = strategy.tokens_per_query
    if strategy.variant == "random":
        return [int(state.rng.choice(state.vocab_ids)) for _ in range(n)]

    def common_draws(count: int) -> list[int]:
        if count <= 0:
            return []
        return [int(w) for w in state.rng.choice(
            state.word_ids, size=count, p=state.word_probs)]

    if strategy.variant == "common-words":
        return common_draws(n)

    entry = state.next_pool_entry()
    if entry is None:
        return common_draws(n)
    tail = [entry[0], *entry[1]]
    if len(tail) >= n:
        return tail
    return common_draws(n - len(tail)) + tail


def run_extraction(client, strategy: ExtractionStrategy,
                   state: QueryState) -> LeakLedger:
    """Issue the full query budget and accumulate the leak ledger.

    ``client(prompt_tokens)`` runs one unmitigated retrieval session and
    returns its SessionLog.
    """
    ledger = LeakLedger()
    for q in range(strategy.query_budget):
        prompt = build_query(strategy, state)
        log = client(prompt)
        pairs = detect_leaks(log)
        new_pairs = {p for p in pairs if p not in ledger.leaked}
        ledger.record(pairs, q)
        if strategy.variant == "feedback-reuse":
            state.absorb(new_pairs)
            if state.last_used is not None and not new_pairs:
                state.retire(state.last_used)
    return ledger


def verify_soundness(ledger: LeakLedger,
                     store_sequences: list[tuple[int, ...]]) -> bool:
    """Every leaked pair occurs contiguously in some store sequence."""
    for (prev, block) in ledger.leaked:
        needle = (prev,) + block
        if not any(seq[i:i + len(needle)] == needle
                   for seq in store_sequences
                   for i in range(len(seq) - len(needle) + 1)):
            return False
    return True


def save_timeline_csv(ledger: LeakLedger, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["queries", "unique_leaks"])
        writer.writerows(ledger.timeline)


def save_ledger_json(ledger: LeakLedger, path, vocab=None) -> None:
    entries = []
    for (prev, block), first in sorted(ledger.leaked.items(),
                                       key=lambda kv: (kv[1], kv[0])):
        entry = {"context_token": prev, "block": list(block),
                 "first_query": first}
        if vocab is not None:
            entry["text"] = " ".join(vocab.word_of(t)
                                     for t in (prev, *block))
        entries.append(entry)
    Path(path).write_text(json.dumps({"unique": len(entries),
                                      "leaks": entries}, indent=2),
                          encoding="utf-8")
