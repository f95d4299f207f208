"""Experiment orchestration over the bundled testbed assets.

Builds models and engines from the data directory, collects labeled
traces with fully derived seeds, and runs the fingerprinting scenarios,
mitigation sweeps, extraction campaigns, and hyperparameter probes the
CLI exposes. Every run is a pure function of (assets, config, seed).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import extraction as extraction_mod
from .. import fingerprint as fp
from ..engines import (DraftPairConfig, LookaheadConfig, RetrievalDatastore,
                       RetrievalParams)
from ..errors import ConfigError
from ..lm import NGramModel, SamplerConfig, Vocab, load_corpus, tokenize, train_ngram
from ..observer import Trace
from ..probes import LookaheadVictim, leak_G, leak_N
from ..stream import (MitigationPolicy, Packet, SessionConfig, SessionLog,
                      apply_mitigation, serve)
from . import assets


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed from a master seed and any hashable parts."""
    text = "|".join([str(master), *map(str, parts)])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def trace_from_packets(packets: list[Packet], label: str | None = None) -> Trace:
    samples = []
    prev = 0.0
    for p in packets:
        samples.append((p.sent_at - prev, p.observable_size))
        prev = p.sent_at
    return Trace(samples=samples, label=label)


@dataclass(frozen=True)
class EngineSpec:
    """Engine selection and parameters, as echoed into reports."""

    type: str = "lookahead"
    ngram_size: int = 5
    guess_set_size: int = 3
    max_match_len: int = 4
    top_k: int = 3
    draft_len: int = 3
    draft_order: int = 2
    draft_burst: int = 4
    fallback_threshold: float = 0.2
    rollback_threshold: float = 4.0

    def describe(self) -> dict:
        base = {"type": self.type}
        if self.type == "lookahead":
            base.update(N=self.ngram_size, G=self.guess_set_size)
        elif self.type == "retrieval":
            base.update(max_match_len=self.max_match_len, top_k=self.top_k,
                        draft_len=self.draft_len)
        elif self.type == "draft_pair":
            base.update(draft_order=self.draft_order,
                        draft_len=self.draft_burst,
                        fallback_threshold=self.fallback_threshold,
                        rollback_threshold=self.rollback_threshold)
        return base


class Testbed:
    """Bundled corpus, models, engines, and prompt sets, built once."""

    __test__ = False  # keep pytest from collecting the imported name

    def __init__(self, data_dir: Path | None = None, order: int = 4,
                 alpha: float = 0.005, max_tokens: int = 48):
        self.data_dir = assets.ensure_assets(data_dir)
        self.order = order
        self.alpha = alpha
        self.max_tokens = max_tokens
        self.vocab, self.docs = load_corpus(self.data_dir / assets.CORPUS_FILE)
        self.model = train_ngram(self.docs, order, alpha, self.vocab)
        self._draft_model: NGramModel | None = None
        self._store: RetrievalDatastore | None = None
        self._store_params: RetrievalParams | None = None
        self.prompts = {
            "exact": self._load_prompts(assets.PROMPTS_EXACT_FILE),
            "similar": self._load_prompts(assets.PROMPTS_SIMILAR_FILE),
            "rephrased": self._load_prompts(assets.PROMPTS_REPHRASED_FILE),
        }

    def _load_prompts(self, name: str) -> list[list[int]]:
        path = self.data_dir / name
        if not path.exists():
            raise ConfigError(f"missing prompt file {path}")
        return [tokenize(ln, self.vocab)
                for ln in path.read_text(encoding="utf-8").splitlines()
                if ln.strip()]

    def draft_model(self, spec: EngineSpec) -> NGramModel:
        if self._draft_model is None:
            self._draft_model = train_ngram(self.docs, spec.draft_order,
                                            self.alpha, self.vocab)
        return self._draft_model

    def store(self, spec: EngineSpec) -> RetrievalDatastore:
        params = RetrievalParams(spec.max_match_len, spec.top_k,
                                 spec.draft_len)
        if self._store is None or self._store_params != params:
            self._store = RetrievalDatastore(self.docs, params)
            self._store_params = params
        return self._store

    def session(self, spec: EngineSpec, prompt_tokens, temperature: float,
                seed: int, policy: MitigationPolicy | None = None,
                max_tokens: int | None = None) -> SessionConfig:
        return SessionConfig(
            engine="draft_pair" if spec.type == "draft_pair" else spec.type,
            model=self.model,
            prompt_tokens=tuple(prompt_tokens),
            max_tokens=max_tokens or self.max_tokens,
            sampler=SamplerConfig(temperature, seed),
            policy=policy or MitigationPolicy.none(),
            lookahead=(LookaheadConfig(spec.ngram_size, spec.guess_set_size)
                       if spec.type == "lookahead" else None),
            store=self.store(spec) if spec.type == "retrieval" else None,
            draft_pair=(DraftPairConfig(self.draft_model(spec),
                                        spec.draft_burst,
                                        spec.fallback_threshold,
                                        spec.rollback_threshold)
                        if spec.type == "draft_pair" else None))

    def run(self, spec: EngineSpec, prompt_tokens, temperature: float,
            seed: int, policy: MitigationPolicy | None = None,
            max_tokens: int | None = None) -> SessionLog:
        return serve(self.session(spec, prompt_tokens, temperature, seed,
                                  policy, max_tokens))


_SCENARIO_PROMPTS = {
    "exact": ("exact", "exact"),
    "similar-structure": ("similar", "similar"),
    "approximate": ("exact", "rephrased"),
}


def _collector(bench: Testbed, spec: EngineSpec, scenario: str,
               temperature: float, master_seed: int,
               policy: MitigationPolicy | None = None):
    train_key, test_key = _SCENARIO_PROMPTS[scenario]
    prompt_sets = {"train": bench.prompts[train_key],
                   "test": bench.prompts[test_key]}
    if len(prompt_sets["train"]) != len(prompt_sets["test"]):
        raise ConfigError("train and test prompt files must align by line")

    def collect(phase: str, p: int, k: int) -> Trace:
        seed = derive_seed(master_seed, scenario, phase, p, k)
        session_policy = _session_policy(policy, seed)
        log = bench.run(spec, prompt_sets[phase][p], temperature, seed,
                        session_policy)
        return trace_from_packets(log.packets, label=f"q{p:02d}")

    return collect, len(prompt_sets["train"])


def _session_policy(policy: MitigationPolicy | None,
                    session_seed: int) -> MitigationPolicy:
    """Give variable padding a per-session noise stream."""
    if policy is None:
        return MitigationPolicy.none()
    if "variable_pad" in policy.variant:
        derived = derive_seed(policy.pad_seed, "pad", session_seed)
        return MitigationPolicy(variant=policy.variant,
                                target_size=policy.target_size,
                                max_pad=policy.max_pad, pad_seed=derived,
                                aggregate_k=policy.aggregate_k)
    return policy


def fingerprint_experiment(bench: Testbed, scenario: str,
                           spec: EngineSpec | None = None,
                           temperature: float = 0.0, tpq: int = 5,
                           master_seed: int = 0,
                           policy: MitigationPolicy | None = None,
                           forest_cfg: fp.ForestConfig | None = None,
                           test_traces: int = 5) -> fp.ExperimentReport:
    spec = spec or EngineSpec()
    forest_cfg = forest_cfg or fp.ForestConfig(
        seed=derive_seed(master_seed, "forest"))
    collect, n_prompts = _collector(bench, spec, scenario, temperature,
                                    master_seed, policy)
    report = fp.run_experiment(scenario, collect, n_prompts, tpq, forest_cfg,
                               test_traces=test_traces)
    report.engine = spec.type
    report.config = {
        "scenario": scenario, "engine": spec.describe(),
        "temperature": temperature, "tpq": tpq, "test_traces": test_traces,
        "seed": master_seed, "model": {"order": bench.order,
                                       "alpha": bench.alpha},
        "max_tokens": bench.max_tokens,
        "policy": (policy or MitigationPolicy.none()).describe(),
        "forest": {"n_trees": forest_cfg.n_trees,
                   "max_depth": forest_cfg.max_depth,
                   "min_samples_split": forest_cfg.min_samples_split,
                   "min_samples_leaf": forest_cfg.min_samples_leaf,
                   "criterion": forest_cfg.criterion,
                   "bootstrap": forest_cfg.bootstrap,
                   "seed": forest_cfg.seed},
    }
    return report


def shuffled_label_control(bench: Testbed, scenario: str = "exact",
                           spec: EngineSpec | None = None,
                           temperature: float = 0.0, tpq: int = 5,
                           master_seed: int = 0) -> float:
    """Chance-floor control: train on randomly permuted labels."""
    spec = spec or EngineSpec()
    collect, n_prompts = _collector(bench, spec, scenario, temperature,
                                    master_seed)
    train = [collect("train", p, k)
             for p in range(n_prompts) for k in range(tpq)]
    test = [collect("test", p, k)
            for p in range(n_prompts) for k in range(5)]
    rng = np.random.Generator(np.random.Philox(derive_seed(master_seed,
                                                           "shuffle")))
    perm = rng.permutation(n_prompts)
    for t in train:
        t.label = f"q{perm[int(t.label[1:])]:02d}"
    model = fp.train_forest(fp.LabeledDataset.from_traces(train, 256, tpq),
                            fp.ForestConfig(seed=derive_seed(master_seed,
                                                             "forest")))
    return fp.evaluate(model, fp.LabeledDataset.from_traces(test, 256)).accuracy


def _collect_raw_packets(bench: Testbed, spec: EngineSpec, scenario: str,
                         temperature: float, master_seed: int, tpq: int,
                         test_traces: int):
    """Unmitigated packet lists per (phase, prompt, trace) for re-use."""
    train_key, test_key = _SCENARIO_PROMPTS[scenario]
    prompt_sets = {"train": bench.prompts[train_key],
                   "test": bench.prompts[test_key]}
    out = {}
    for phase, count in (("train", tpq), ("test", test_traces)):
        for p in range(len(prompt_sets[phase])):
            for k in range(count):
                seed = derive_seed(master_seed, scenario, phase, p, k)
                log = bench.run(spec, prompt_sets[phase][p], temperature, seed)
                out[(phase, p, k)] = (seed, log.packets)
    return out, len(prompt_sets["train"])


def sweep_policies() -> list[MitigationPolicy]:
    """The evaluated mitigation grid: none, constant, variable Ds, aggregation ks."""
    policies = [MitigationPolicy.none(), MitigationPolicy.constant_pad(1024)]
    policies += [MitigationPolicy.variable_pad(d) for d in (6, 12, 24, 48)]
    policies += [MitigationPolicy.aggregate(k) for k in (3, 5, 10, 20)]
    return policies


def mitigation_sweep(bench: Testbed, spec: EngineSpec | None = None,
                     scenario: str = "exact", temperature: float = 0.8,
                     tpq: int = 5, seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
                     policies: list[MitigationPolicy] | None = None,
                     test_traces: int = 5) -> list[dict]:
    """Accuracy/overhead table over the mitigation grid.

    Mitigation does not feed back into decoding, so each seed's sessions
    run once unpadded and every policy point re-frames the same packets.
    """
    spec = spec or EngineSpec()
    policies = policies if policies is not None else sweep_policies()
    per_seed_packets = {}
    for seed in seeds:
        per_seed_packets[seed] = _collect_raw_packets(
            bench, spec, scenario, temperature, seed, tpq, test_traces)

    rows = []
    for policy in policies:
        accuracies, overheads = [], []
        for seed in seeds:
            packets_by_key, n_prompts = per_seed_packets[seed]
            train, test = [], []
            raw_bytes = mitigated_bytes = 0
            for (phase, p, k), (session_seed, packets) in packets_by_key.items():
                session_policy = _session_policy(policy, session_seed)
                mitigated = apply_mitigation(packets, session_policy)
                raw_bytes += sum(pk.payload_len for pk in packets)
                mitigated_bytes += sum(pk.observable_size for pk in mitigated)
                trace = trace_from_packets(mitigated, label=f"q{p:02d}")
                (train if phase == "train" else test).append(trace)
            model = fp.train_forest(
                fp.LabeledDataset.from_traces(train, 256, tpq),
                fp.ForestConfig(seed=derive_seed(seed, "forest")))
            report = fp.evaluate(model,
                                 fp.LabeledDataset.from_traces(test, 256))
            accuracies.append(report.accuracy)
            overheads.append(mitigated_bytes / raw_bytes if raw_bytes else 1.0)
        rows.append({"policy": policy.describe(),
                     "accuracy_mean": float(np.mean(accuracies)),
                     "accuracy_per_seed": accuracies,
                     "overhead_mean": float(np.mean(overheads)),
                     "n_labels": n_prompts})
    return rows


def tpq_temperature_grid(bench: Testbed, spec: EngineSpec | None = None,
                         scenario: str = "exact",
                         tpq_values: tuple[int, ...] = (5, 10, 20, 30),
                         temperatures: tuple[float, ...] = (0.3, 0.6, 0.8, 1.0),
                         master_seed: int = 0) -> list[dict]:
    """The profiling-budget by temperature accuracy grid."""
    spec = spec or EngineSpec()
    rows = []
    for temperature in temperatures:
        for tpq in tpq_values:
            report = fingerprint_experiment(
                bench, scenario, spec, temperature=temperature, tpq=tpq,
                master_seed=derive_seed(master_seed, "grid", temperature, tpq))
            rows.append({"temperature": temperature, "tpq": tpq,
                         "accuracy": report.accuracy,
                         "macro_f1": report.macro_f1})
    return rows


class ExtractionBench:
    """The retrieval-engine leakage target built from the bundled assets."""

    def __init__(self, data_dir: Path | None = None, order: int = 3,
                 alpha: float = 0.001, max_match_len: int = 4, top_k: int = 3,
                 draft_len: int = 3, max_tokens: int = 12):
        self.data_dir = assets.ensure_assets(data_dir)
        lines = assets.extraction_model_lines(self.data_dir)
        self.vocab = Vocab.from_words(w for ln in lines for w in ln.split())
        corpus = [tokenize(ln, self.vocab) for ln in lines]
        self.model = train_ngram(corpus, order, alpha, self.vocab)
        store_lines = (self.data_dir / assets.EXTRACTION_STORE_FILE
                       ).read_text(encoding="utf-8").splitlines()
        self.store_sequences = [tokenize(ln, self.vocab)
                                for ln in store_lines if ln.strip()]
        self.store = RetrievalDatastore(
            self.store_sequences,
            RetrievalParams(max_match_len, top_k, draft_len))
        self.max_tokens = max_tokens
        self.wordlist = assets.load_wordlist(self.data_dir /
                                             assets.WORDLIST_FILE)

    def client(self, temperature: float = 0.0, seed: int = 0):
        def _run(prompt_tokens) -> SessionLog:
            return serve(SessionConfig(
                engine="retrieval", model=self.model,
                prompt_tokens=tuple(prompt_tokens),
                max_tokens=self.max_tokens,
                sampler=SamplerConfig(temperature, seed),
                policy=MitigationPolicy.none(), store=self.store))
        return _run

    def query_state(self, seed: int, top_k_words: int = 40
                    ) -> extraction_mod.QueryState:
        freq: dict[str, int] = {}
        lines = assets.extraction_model_lines(self.data_dir)
        for ln in lines:
            for w in ln.split():
                freq[w] = freq.get(w, 0) + 1
        ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
        weighted = [(self.vocab.id_of(w), float(c))
                    for w, c in ranked[:top_k_words]]
        return extraction_mod.QueryState(self.vocab.content_ids(), weighted,
                                         seed)


def extraction_campaign(bench: ExtractionBench, variant: str, budget: int,
                        tokens_per_query: int = 8,
                        seeds: tuple[int, ...] = (0, 1, 2)) -> dict:
    """Multi-seed extraction runs with a mean timeline."""
    strategy = extraction_mod.ExtractionStrategy(variant, budget,
                                                 tokens_per_query)
    ledgers = []
    for seed in seeds:
        state = bench.query_state(derive_seed(seed, "extract", variant))
        ledgers.append(extraction_mod.run_extraction(
            bench.client(), strategy, state))
    sound = all(extraction_mod.verify_soundness(l, bench.store.sequences)
                for l in ledgers)
    mean_timeline = [
        (q + 1, float(np.mean([l.timeline[q][1] for l in ledgers])))
        for q in range(budget)]
    return {"strategy": variant, "budget": budget, "seeds": list(seeds),
            "sound": sound,
            "final_unique": [l.unique_count() for l in ledgers],
            "mean_final_unique": float(np.mean([l.unique_count()
                                                for l in ledgers])),
            "mean_timeline": mean_timeline,
            "ledgers": ledgers}


def probe_victim(ngram_size: int, guess_set_size: int,
                 temperature: float = 0.0, seed: int = 0) -> LookaheadVictim:
    return LookaheadVictim(LookaheadConfig(ngram_size, guess_set_size),
                           temperature=temperature, seed=seed)


def probe_phrases(data_dir: Path | None = None) -> list[list[str]]:
    data_dir = assets.ensure_assets(data_dir)
    return [ln.split() for ln in
            (data_dir / assets.PROBE_PHRASES_FILE).read_text(
                encoding="utf-8").splitlines() if ln.strip()]


def run_probe_n(ngram_size: int, guess_set_size: int = 3,
                n_upper_bound: int = 10, temperature: float = 0.0,
                seed: int = 0):
    victim = probe_victim(ngram_size, guess_set_size, temperature, seed)
    return leak_N(victim, n_upper_bound)


def run_probe_g(guess_set_size: int, ngram_size: int = 4,
                g_upper_bound: int = 6, data_dir: Path | None = None,
                temperature: float = 0.0, seed: int = 0):
    victim = probe_victim(ngram_size, guess_set_size, temperature, seed)
    return leak_G(victim, g_upper_bound, "run", probe_phrases(data_dir))
