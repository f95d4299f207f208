"""Recovering a lookahead engine's N and G from token-count traces only.

leak_N drives the engine with a maximally repetitive prompt: under
sustained correct speculation the per-iteration token count saturates at
N-1. leak_G forces cyclic repetition of P phrases sharing a prefix that
ends in a key token; once P exceeds the guess-set size, the candidate
needed at each return of the key token has always just been evicted, so
the token after the key is mis-speculated every cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .engines import LookaheadConfig
from .errors import ConfigError
from .lm import SamplerConfig, Vocab, tokenize, train_ngram
from .stream import MitigationPolicy, SessionConfig, SessionLog, serve


@dataclass
class ProbeResult:
    recovered: int | None
    confidence: float
    evidence: dict = field(default_factory=dict)
    reason: str = ""

    @property
    def conclusive(self) -> bool:
        return self.recovered is not None


class LookaheadVictim:
    """A lookahead engine whose (N, G) are hidden from the probe code.

    The probe supplies the training corpus and prompt; the victim owns
    the engine configuration, mirroring an attacker who controls content
    but not the serving stack.
    """

    def __init__(self, lookahead: LookaheadConfig, order: int = 5,
                 alpha: float = 0.01, temperature: float = 0.0,
                 seed: int = 0):
        self._lookahead = lookahead
        self.order = order
        self.alpha = alpha
        self.temperature = temperature
        self.seed = seed

    def run(self, corpus_lines: list[str], prompt_words: list[str],
            max_tokens: int) -> tuple[SessionLog, Vocab]:
        words = [w for ln in corpus_lines for w in ln.split()]
        vocab = Vocab.from_words(words)
        corpus = [tokenize(ln, vocab) for ln in corpus_lines]
        model = train_ngram(corpus, self.order, self.alpha, vocab)
        cfg = SessionConfig(
            engine="lookahead", model=model,
            prompt_tokens=tuple(vocab.id_of(w) for w in prompt_words),
            max_tokens=max_tokens,
            sampler=SamplerConfig(self.temperature, self.seed),
            policy=MitigationPolicy.none(), lookahead=self._lookahead)
        return serve(cfg), vocab


def leak_N(victim, n_upper_bound: int = 10,
           repeat_word: str = "aa") -> ProbeResult:
    """Recover N as 1 + the saturated tokens-per-iteration count."""
    if n_upper_bound < 2:
        raise ConfigError("n_upper_bound must be >= 2")
    corpus = [" ".join([repeat_word] * 400)]
    prompt = [repeat_word] * 4
    max_tokens = max(60, 8 * n_upper_bound)
    log, _ = victim.run(corpus, prompt, max_tokens)
    counts = log.token_counts
    multi = [i for i, c in enumerate(counts) if c > 1]
    if not multi:
        return ProbeResult(recovered=None, confidence=0.0,
                           evidence={"counts": counts},
                           reason="no multi-token iteration observed")
    steady = counts[multi[0]:]
    peak = max(steady)
    confirming = sum(1 for c in steady if c == peak)
    return ProbeResult(recovered=peak + 1,
                       confidence=confirming / len(steady),
                       evidence={"counts": counts,
                                 "warmup_iterations": multi[0]})


def validate_phrase_set(phrase_set: list[list[str]], key_token: str) -> int:
    """Check the shared prefix / distinct-successor precondition.

    Returns the index of the key token within the shared prefix.
    """
    if len(phrase_set) < 2:
        raise ConfigError("need at least two probe phrases")
    first = phrase_set[0]
    if key_token not in first:
        raise ConfigError(f"key token {key_token!r} not in phrases")
    key_pos = first.index(key_token)
    successors = []
    for phrase in phrase_set:
        if phrase[:key_pos + 1] != first[:key_pos + 1]:
            raise ConfigError("phrases must share the prefix through the "
                              "key token")
        if len(phrase) <= key_pos + 1:
            raise ConfigError("phrases must continue past the key token")
        successors.append(phrase[key_pos + 1])
    if len(set(successors)) != len(successors):
        raise ConfigError("successor tokens after the key must be distinct")
    if len({len(p) for p in phrase_set}) != 1:
        raise ConfigError("phrases must share one length")
    return key_pos


def run_phrase_session(victim, phrase_set: list[list[str]], p: int,
                       cycles_prompt: int = 2, cycles_measure: int = 4,
                       model_repeats: int = 30) -> tuple[SessionLog, Vocab, int]:
    """One forced-repetition session cycling the first p phrases.

    Returns (log, vocab, phrase_len).
    """
    phrases = phrase_set[:p]
    phrase_len = len(phrases[0])
    cycle = [w for ph in phrases for w in ph]
    corpus = [" ".join(cycle * model_repeats)]
    prompt = cycle * cycles_prompt
    max_tokens = (cycles_prompt + cycles_measure) * len(cycle)
    log, vocab = victim.run(corpus, prompt, max_tokens)
    return log, vocab, phrase_len


def classify_post_key(log: SessionLog, vocab: Vocab, key_token: str,
                      steady_start: int) -> tuple[int, int]:
    """Count (correct, total) steady-state speculations of post-key tokens.

    A post-key token is correctly speculated when its position inside its
    iteration falls within the accepted prefix.
    """
    key_id = vocab.id_of(key_token)
    stream = log.output_tokens
    correct = total = 0
    pos = 0
    spans = []
    for it in log.iterations:
        spans.append((pos, it))
        pos += len(it.tokens)
    for p in range(1, len(stream)):
        if stream[p - 1] != key_id or p < steady_start:
            continue
        total += 1
        for start, it in spans:
            if start <= p < start + len(it.tokens):
                if p - start < it.speculated_accepted:
                    correct += 1
                break
    return correct, total


def leak_G(victim, g_upper_bound: int, key_token: str,
           phrase_set: list[list[str]]) -> ProbeResult:
    """Recover G as the largest forced-phrase count still fully cached."""
    if g_upper_bound < 1:
        raise ConfigError("g_upper_bound must be >= 1")
    if len(phrase_set) < g_upper_bound + 1:
        raise ConfigError(f"need at least {g_upper_bound + 1} phrases")
    validate_phrase_set(phrase_set, key_token)

    per_p = []
    for p in range(1, g_upper_bound + 2):
        log, vocab, phrase_len = run_phrase_session(victim, phrase_set, p)
        steady_start = 2 * p * phrase_len
        correct, total = classify_post_key(log, vocab, key_token, steady_start)
        fraction = correct / total if total else 0.0
        per_p.append({"P": p, "post_key_correct": correct,
                      "post_key_total": total, "fraction": fraction,
                      "token_counts": log.token_counts})

    speculated = [row["fraction"] >= 0.5 for row in per_p]
    if all(speculated):
        return ProbeResult(recovered=None, confidence=0.0,
                           evidence={"per_p": per_p},
                           reason="no correct-to-incorrect transition "
                                  f"within P <= {g_upper_bound + 1}")
    recovered = 0
    for row, ok in zip(per_p, speculated):
        if ok:
            recovered = row["P"]
        else:
            break
    if recovered == 0:
        return ProbeResult(recovered=None, confidence=0.0,
                           evidence={"per_p": per_p},
                           reason="mis-speculation already at P=1")
    agreement = [row["fraction"] if row["P"] <= recovered
                 else 1.0 - row["fraction"] for row in per_p]
    return ProbeResult(recovered=recovered,
                       confidence=float(sum(agreement) / len(agreement)),
                       evidence={"per_p": per_p})
