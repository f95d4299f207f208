"""Deterministic generation of the bundled data files.

Everything the experiments consume is synthesized here from fixed seeds.
The fingerprint corpus gives each benchmark document private repeated
motifs, so the self-drafting cache gets traction inside a response while
greedy chains stay on their own document. The extraction material pairs a
private store with a public corpus sharing only a small common-word pool:
prompts built from frequent words can enter store sequences through their
two-word heads, random word salad almost never can, and reused leaks walk
ever deeper. Regenerating into an empty directory reproduces identical
bytes.
"""

from __future__ import annotations

import os
import zlib
from pathlib import Path

import numpy as np

VOWELS = "aeiou"
CONSONANTS = "bdfgklmnprstvz"

FUNCTION_WORDS = ["the", "of", "to", "and", "a", "in", "is", "on",
                  "for", "with", "as", "at", "by", "it"]

DATA_DIR_ENV = "SPECLEAK_DATA_DIR"

CORPUS_FILE = "corpus.txt"
PROMPTS_EXACT_FILE = "prompts_exact.txt"
PROMPTS_SIMILAR_FILE = "prompts_similar.txt"
PROMPTS_REPHRASED_FILE = "prompts_rephrased.txt"
WORDLIST_FILE = "wordlist.txt"
EXTRACTION_STORE_FILE = "extraction_store.txt"
EXTRACTION_PUBLIC_FILE = "extraction_public.txt"
PROBE_PHRASES_FILE = "probe_phrases.txt"

ALL_FILES = (CORPUS_FILE, PROMPTS_EXACT_FILE, PROMPTS_SIMILAR_FILE,
             PROMPTS_REPHRASED_FILE, WORDLIST_FILE, EXTRACTION_STORE_FILE,
             EXTRACTION_PUBLIC_FILE, PROBE_PHRASES_FILE)

N_BENCHMARK_PROMPTS = 50
N_STORE_SEQUENCES = 200
BENCHMARK_COPIES = 4
STORE_COPIES = 3

_MASTER_SEED = 20240917


def default_data_dir() -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path.cwd() / "specleak-data"


def _rng(tag: str) -> np.random.Generator:
    seed = np.random.SeedSequence([_MASTER_SEED, zlib.crc32(tag.encode())])
    return np.random.Generator(np.random.Philox(seed))


def _word(rng, syllables=None) -> str:
    n = syllables or int(rng.integers(2, 4))
    out = []
    for _ in range(n):
        out.append(CONSONANTS[int(rng.integers(0, len(CONSONANTS)))])
        out.append(VOWELS[int(rng.integers(0, len(VOWELS)))])
    return "".join(out)


def _word_pool(tag: str, count: int, reserved=()) -> list[str]:
    rng = _rng(tag)
    pool: list[str] = []
    seen = set(FUNCTION_WORDS) | set(reserved)
    while len(pool) < count:
        w = _word(rng)
        if w not in seen:
            seen.add(w)
            pool.append(w)
    return pool


def _pick(rng, seq):
    return seq[int(rng.integers(0, len(seq)))]


class CorpusSpec:
    """Holds the generated fingerprint-benchmark material in memory."""

    def __init__(self):
        rng = _rng("fingerprint-corpus")
        content = _word_pool("content-words", 260)
        entities = _word_pool("entities", N_BENCHMARK_PROMPTS)
        aliases = _word_pool("aliases", 40)

        def segment(lo=3, hi=7):
            length = int(rng.integers(lo, hi))
            seg = []
            for _ in range(length):
                if rng.random() < 0.25:
                    seg.append(_pick(rng, FUNCTION_WORDS))
                else:
                    seg.append(_pick(rng, content))
            return seg

        def cycle(hub_count: int):
            # a per-document loop: distinct words except for one "hub"
            # word recurring hub_count times with distinct followers.
            # Recurring above the default guess-set size forces periodic
            # mis-speculations whose timing depends on where the hubs
            # sit, so iteration-length patterns are document-specific
            # while overall mis-speculation rates and loop lengths stay
            # uniform (a count-only observer learns little).
            length = 19
            words: list[str] = []
            seen = set()
            while len(words) < length:
                w = _pick(rng, content)
                if w not in seen:
                    seen.add(w)
                    words.append(w)
            hub = _pick(rng, content)
            while hub in seen:
                hub = _pick(rng, content)
            # drop the hub into per-document random slots, min gap 3
            while True:
                slots = sorted(int(rng.integers(1, length))
                               for _ in range(hub_count))
                gaps = [b - a for a, b in zip(slots, slots[1:])]
                if all(g >= 3 for g in gaps):
                    break
            for k, pos in enumerate(slots):
                words.insert(pos + k, hub)
            return words

        def body(i: int):
            # three verbatim passes keep the greedy chain looping: the
            # context at a pass boundary is followed twice by the cycle
            # start and only once by end-of-document
            loop = cycle(hub_count=4 + (i % 2))
            return segment(3, 5) + loop * 3

        self.exact_prompts = []
        self.exact_docs = []
        openers = [["how", "does"], ["what", "makes"], ["why", "will"],
                   ["when", "can"], ["where", "does"]]
        for i in range(N_BENCHMARK_PROMPTS):
            prompt = list(openers[i % len(openers)])
            prompt += [entities[i], _pick(rng, content)]
            self.exact_prompts.append(prompt)
            self.exact_docs.append(prompt + body(i))

        self.similar_prompts = []
        self.similar_docs = []
        for i in range(N_BENCHMARK_PROMPTS):
            prompt = ["what", "comes", "with", entities[i], "then"]
            self.similar_prompts.append(prompt)
            self.similar_docs.append(prompt + body(i + 2))

        # filler gives frequency skew and vocabulary mass only
        self.filler_docs = []
        for _ in range(420):
            words = segment(4, 8)
            for _ in range(int(rng.integers(3, 6))):
                words += segment(3, 5) + segment(2, 5)
            self.filler_docs.append(words)
        for i, alias in enumerate(aliases):
            self.filler_docs[i % len(self.filler_docs)].append(alias)

        # approximate-knowledge sidecar. Even prompts swap only the first
        # word: that falls outside the model's context window, so the
        # greedy response is preserved, like a rephrasing that elicits
        # the same answer. Odd prompts gain a tail word, which shifts the
        # context and the response.
        synonym = {"how": "why", "what": "which", "why": "how",
                   "when": "whenever", "where": "wherever",
                   "does": "could", "makes": "gives", "will": "might",
                   "can": "may"}
        self.filler_docs[0] += sorted(set(synonym.values()))
        self.rephrased_prompts = []
        for i, prompt in enumerate(self.exact_prompts):
            if i % 2 == 0:
                alt = [synonym.get(prompt[0], prompt[0])] + prompt[1:]
            else:
                alt = [synonym.get(w, w) for w in prompt]
                alt = alt + [aliases[i % len(aliases)]]
            self.rephrased_prompts.append(alt)

    def corpus_lines(self) -> list[str]:
        lines = []
        for doc in self.exact_docs + self.similar_docs:
            lines.extend([" ".join(doc)] * BENCHMARK_COPIES)
        lines.extend(" ".join(doc) for doc in self.filler_docs)
        order = _rng("corpus-shuffle").permutation(len(lines))
        return [lines[i] for i in order]


def _extraction_material():
    """Private store plus public corpus for the leakage target.

    Store sequences open with a two-common-word head pair unique to the
    sequence and continue with sequence-private rare words. Public text
    reuses the common pool but never a store head pair, so the model's
    greedy chain enters a sequence exactly when the context ends in its
    head pair (or deeper, for reused leaks).
    """
    rng = _rng("extraction")
    common = _word_pool("extraction-common", 40)
    store_rare = _word_pool("extraction-store-rare", 2600)
    public_rare = _word_pool("extraction-public-rare", 8000)

    head_pairs = []
    used = set()
    while len(head_pairs) < N_STORE_SEQUENCES:
        pair = (_pick(rng, common), _pick(rng, common))
        if pair[0] != pair[1] and pair not in used:
            used.add(pair)
            head_pairs.append(pair)

    store = []
    rare_iter = iter(store_rare)
    for j in range(N_STORE_SEQUENCES):
        length = int(rng.integers(10, 15))
        seq = list(head_pairs[j])
        for k in range(length):
            if k == 5 and j % 2 == 0:
                seq.append(_pick(rng, common))
            else:
                seq.append(next(rare_iter))
        store.append(seq)

    public = []
    for _ in range(600):
        length = int(rng.integers(12, 20))
        doc = []
        for _ in range(length):
            if rng.random() < 0.5:
                w = _pick(rng, common)
                while doc and (doc[-1], w) in used:
                    w = _pick(rng, common)
                doc.append(w)
            else:
                doc.append(_pick(rng, public_rare))
        public.append(doc)
    return store, public


def _probe_phrases() -> list[list[str]]:
    """Seven-word phrases sharing the prefix "we run", distinct afterwards."""
    successors = ["north", "south", "east", "west", "far", "near", "fast",
                  "slow"]
    fillers = _word_pool("probe-fillers", 3 * len(successors),
                         reserved=successors + ["we", "run", "stop"])
    phrases = []
    for i, succ in enumerate(successors):
        f = fillers[3 * i:3 * i + 3]
        phrases.append(["we", "run", succ, f[0], f[1], f[2], "stop"])
    return phrases


def _wordlist(lines: list[str]) -> list[tuple[str, int]]:
    freq: dict[str, int] = {}
    for line in lines:
        for w in line.split():
            freq[w] = freq.get(w, 0) + 1
    return sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))


def _write(path: Path, lines) -> None:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def ensure_assets(data_dir: Path | None = None, force: bool = False) -> Path:
    """Generate any missing bundled files; returns the data directory."""
    data_dir = Path(data_dir) if data_dir else default_data_dir()
    data_dir.mkdir(parents=True, exist_ok=True)
    if not force and all((data_dir / f).exists() for f in ALL_FILES):
        return data_dir

    spec = CorpusSpec()
    corpus_lines = spec.corpus_lines()
    _write(data_dir / CORPUS_FILE, corpus_lines)
    _write(data_dir / PROMPTS_EXACT_FILE,
           (" ".join(p) for p in spec.exact_prompts))
    _write(data_dir / PROMPTS_SIMILAR_FILE,
           (" ".join(p) for p in spec.similar_prompts))
    _write(data_dir / PROMPTS_REPHRASED_FILE,
           (" ".join(p) for p in spec.rephrased_prompts))
    _write(data_dir / WORDLIST_FILE,
           (f"{w}\t{c}" for w, c in _wordlist(corpus_lines)))

    store, public = _extraction_material()
    _write(data_dir / EXTRACTION_STORE_FILE, (" ".join(s) for s in store))
    _write(data_dir / EXTRACTION_PUBLIC_FILE, (" ".join(d) for d in public))
    _write(data_dir / PROBE_PHRASES_FILE,
           (" ".join(p) for p in _probe_phrases()))
    return data_dir


def extraction_model_lines(data_dir: Path) -> list[str]:
    """Training lines for the extraction target: store (weighted) + public."""
    store = (data_dir / EXTRACTION_STORE_FILE).read_text(
        encoding="utf-8").splitlines()
    public = (data_dir / EXTRACTION_PUBLIC_FILE).read_text(
        encoding="utf-8").splitlines()
    return [ln for ln in store for _ in range(STORE_COPIES)] + public


def load_wordlist(path) -> list[tuple[str, float]]:
    """Frequency-ranked wordlist: 'word<TAB>count' lines, or bare words.

    Bare ranked lists (e.g. public top-10k English words) get Zipf weights
    1/rank so sampling still follows the ranking.
    """
    entries = []
    for rank, line in enumerate(Path(path).read_text(encoding="utf-8")
                                .splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "\t" in line:
            word, count = line.split("\t", 1)
            entries.append((word, float(count)))
        else:
            entries.append((line, 1.0 / rank))
    return entries
