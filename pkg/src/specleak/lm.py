"""Word-level vocabulary and a seeded additive-smoothed n-gram model.

The model is the stand-in target (and draft) generator for the testbed:
deterministic to train, cheap to query, and with a greedy mode whose
outputs are exactly reproducible across runs and platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusError, UnknownWordError

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
RESERVED = (BOS, EOS, UNK)

BOS_ID = 0
EOS_ID = 1
UNK_ID = 2

MODEL_FORMAT = "specleak-ngram"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Vocab:
    """Bijection between token strings and dense ids; ids 0..2 are reserved."""

    entries: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    @classmethod
    def from_words(cls, words) -> "Vocab":
        content = sorted(set(words) - set(RESERVED))
        entries = tuple(RESERVED) + tuple(content)
        return cls(entries=entries, index={w: i for i, w in enumerate(entries)})

    def __len__(self) -> int:
        return len(self.entries)

    def id_of(self, word: str, allow_unknown: bool = False) -> int:
        tid = self.index.get(word)
        if tid is None:
            if allow_unknown:
                return UNK_ID
            raise UnknownWordError(word)
        return tid

    def word_of(self, token_id: int) -> str:
        return self.entries[token_id]

    def content_ids(self) -> list[int]:
        """Ids of non-reserved tokens."""
        return list(range(len(RESERVED), len(self.entries)))

    def mean_token_bytes(self, separator: str = " ") -> float:
        """Mean on-wire bytes per token (word + one separator), over content words."""
        lens = [len(w.encode("utf-8")) + len(separator.encode("utf-8"))
                for w in self.entries[len(RESERVED):]]
        if not lens:
            return 1.0
        return float(np.mean(lens))


def tokenize(text: str, vocab: Vocab, allow_unknown: bool = False) -> list[int]:
    """Map whitespace-delimited words to token ids.

    Raises UnknownWordError for out-of-vocabulary words unless
    ``allow_unknown`` maps them to the reserved UNK token.
    """
    return [vocab.id_of(w, allow_unknown) for w in text.split()]


def detokenize(token_ids, vocab: Vocab, separator: str = " ") -> str:
    return separator.join(vocab.word_of(t) for t in token_ids)


@dataclass(frozen=True)
class SamplerConfig:
    """Session sampling knobs; temperature 0 means greedy argmax."""

    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class NGramModel:
    """Additive-smoothed n-gram model over token ids.

    Immutable after training. ``next_distribution`` always returns a proper
    distribution over the full vocabulary; contexts never seen in training
    fall back to the exact-uniform smoothing identity.
    """

    def __init__(self, order: int, alpha: float, vocab: Vocab,
                 counts: dict[tuple[int, ...], dict[int, int]]):
        if order < 1:
            raise ValueError("order must be >= 1")
        if alpha <= 0:
            raise ValueError("smoothing constant must be > 0")
        self.order = order
        self.alpha = alpha
        self.vocab = vocab
        self._counts = counts
        self._totals = {ctx: sum(succ.values()) for ctx, succ in counts.items()}
        self._argmax_cache: dict[tuple[int, ...], int] = {}

    @property
    def context_len(self) -> int:
        return self.order - 1

    def _key(self, context) -> tuple[int, ...]:
        ctx = tuple(context)
        k = self.context_len
        if len(ctx) >= k:
            return ctx[len(ctx) - k:]
        return (BOS_ID,) * (k - len(ctx)) + ctx

    def next_distribution(self, context) -> np.ndarray:
        """Smoothed successor distribution given the trailing order-1 tokens."""
        v = len(self.vocab)
        key = self._key(context)
        succ = self._counts.get(key)
        if not succ:
            return np.full(v, 1.0 / v)
        vec = np.full(v, self.alpha)
        for tok, c in succ.items():
            vec[tok] += c
        vec /= self._totals[key] + self.alpha * v
        return vec

    def greedy_next(self, context) -> int:
        """Argmax successor with lowest-id tie-break; memoized per context."""
        key = self._key(context)
        tok = self._argmax_cache.get(key)
        if tok is None:
            tok = int(np.argmax(self.next_distribution(key)))
            self._argmax_cache[key] = tok
        return tok


class TokenSampler:
    """Per-session sampling state: a seeded counter-based generator.

    Identical (seed, draw history) give identical tokens on any platform.
    """

    def __init__(self, cfg: SamplerConfig):
        self.cfg = cfg
        self._rng = np.random.Generator(np.random.Philox(cfg.seed))

    def draw(self, distribution: np.ndarray) -> int:
        t = self.cfg.temperature
        if t == 0:
            return int(np.argmax(distribution))
        p = np.power(distribution, 1.0 / t)
        p /= p.sum()
        u = self._rng.random()
        return int(np.searchsorted(np.cumsum(p), u, side="right"))


def sample(model: NGramModel, context, cfg: SamplerConfig,
           sampler: TokenSampler | None = None) -> int:
    """One next-token draw; pass a TokenSampler to keep session rng state."""
    if sampler is None:
        sampler = TokenSampler(cfg)
    return sampler.draw(model.next_distribution(context))


def train_ngram(corpus: list[list[int]], order: int, alpha: float,
                vocab: Vocab) -> NGramModel:
    """Count (context, successor) pairs over BOS-padded documents.

    Every document contributes its tokens plus a terminating EOS as
    successors; BOS appears only as left padding.
    """
    if not corpus:
        raise CorpusError("cannot train on an empty corpus")
    if order < 1:
        raise ValueError("order must be >= 1")
    if alpha <= 0:
        raise ValueError("smoothing constant must be > 0")
    k = order - 1
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    for doc in corpus:
        padded = [BOS_ID] * k + list(doc) + [EOS_ID]
        for i in range(k, len(padded)):
            ctx = tuple(padded[i - k:i])
            succ = counts.setdefault(ctx, {})
            tok = padded[i]
            succ[tok] = succ.get(tok, 0) + 1
    return NGramModel(order=order, alpha=alpha, vocab=vocab, counts=counts)


def load_corpus(path, vocab: Vocab | None = None,
                allow_unknown: bool = False) -> tuple[Vocab, list[list[int]]]:
    """Read a one-document-per-line UTF-8 corpus file.

    Blank lines are skipped. When no vocabulary is supplied, one is built
    from the corpus itself.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise CorpusError(f"corpus {path} has no non-empty lines")
    if vocab is None:
        words = [w for ln in lines for w in ln.split()]
        vocab = Vocab.from_words(words)
    docs = []
    for n, ln in enumerate(lines, start=1):
        try:
            docs.append(tokenize(ln, vocab, allow_unknown))
        except UnknownWordError as exc:
            raise CorpusError(f"{path}:{n}: {exc}") from exc
    return vocab, docs


def save_model(model: NGramModel, path) -> None:
    """Persist (order, alpha, vocab, counts) as versioned JSON."""
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "order": model.order,
        "alpha": model.alpha,
        "vocab": list(model.vocab.entries),
        "contexts": [
            [list(ctx), sorted(succ.items())]
            for ctx, succ in sorted(model._counts.items())
        ],
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")),
                          encoding="utf-8")


def load_model(path) -> NGramModel:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot load model {path}: {exc}") from exc
    if payload.get("format") != MODEL_FORMAT:
        raise CorpusError(f"{path}: not a {MODEL_FORMAT} file")
    if payload.get("version") != MODEL_FORMAT_VERSION:
        raise CorpusError(f"{path}: unsupported format version "
                          f"{payload.get('version')}")
    entries = tuple(payload["vocab"])
    vocab = Vocab(entries=entries, index={w: i for i, w in enumerate(entries)})
    counts = {tuple(ctx): {int(t): int(c) for t, c in succ}
              for ctx, succ in payload["contexts"]}
    return NGramModel(order=payload["order"], alpha=payload["alpha"],
                      vocab=vocab, counts=counts)
