"""End-to-end acceptance suite.

Each test exercises one headline property of the testbed at its stated
tolerance and prints a PASS line with the measured values, so a plain
``pytest -s tests/test_acceptance.py`` doubles as the acceptance report.
"""

import time

import numpy as np
import pytest

from specleak.engines import LookaheadConfig
from specleak.harness.config import make_report, strip_volatile
from specleak.harness.experiments import (EngineSpec, Testbed,
                                          extraction_campaign,
                                          fingerprint_experiment,
                                          mitigation_sweep, probe_phrases,
                                          shuffled_label_control)
from specleak.probes import (LookaheadVictim, leak_G, leak_N,
                             run_phrase_session)


def _pass(name: str, detail: str, started: float) -> None:
    print(f"[PASS] {name}: {detail} ({time.time() - started:.1f}s)")


@pytest.fixture(scope="module")
def sweep_rows(bench):
    """Shared mitigation sweep backing criteria 7 and 8."""
    return mitigation_sweep(bench, temperature=0.8, tpq=5,
                            seeds=(0, 1, 2, 3, 4))


def seeded_prompts(bench, count: int, seed: int = 1234):
    rng = np.random.Generator(np.random.Philox(seed))
    prompts = []
    for _ in range(count):
        doc = bench.docs[int(rng.integers(0, len(bench.docs)))]
        length = int(rng.integers(3, 7))
        start = int(rng.integers(0, max(1, len(doc) - length)))
        prompts.append(doc[start:start + length])
    return prompts


def test_criterion_1_losslessness(bench):
    started = time.time()
    spec = EngineSpec()
    prompts = seeded_prompts(bench, 100)
    for prompt in prompts:
        baseline = bench.run(EngineSpec(type="autoregressive"), prompt,
                             0.0, 0).output_tokens
        for engine in ("lookahead", "retrieval"):
            got = bench.run(EngineSpec(type=engine, **{
                k: v for k, v in spec.__dict__.items() if k != "type"}),
                prompt, 0.0, 0).output_tokens
            assert got == baseline, f"{engine} diverged on prompt {prompt}"
    _pass("criterion 1 losslessness",
          "lookahead and retrieval outputs byte-identical to the "
          "autoregressive baseline on 100 seeded prompts", started)


def test_criterion_2_n_bound_and_probe():
    started = time.time()
    for n in range(3, 9):
        for seed in range(5):
            victim = LookaheadVictim(LookaheadConfig(n, 3), seed=seed)
            result = leak_N(victim, n_upper_bound=10)
            assert result.conclusive
            assert result.recovered == n, (n, seed, result)
            assert max(result.evidence["counts"]) <= n - 1
    _pass("criterion 2 N-bound and N-probe",
          "iterations bounded by N-1 and N recovered exactly for "
          "N in 3..8, 5 seeds each", started)


def test_criterion_3_g_probe(data_dir):
    started = time.time()
    phrases = probe_phrases(data_dir)
    for g in range(1, 7):
        for seed in range(5):
            victim = LookaheadVictim(LookaheadConfig(4, g), seed=seed)
            result = leak_G(victim, g_upper_bound=6, key_token="run",
                            phrase_set=phrases)
            assert result.conclusive
            assert result.recovered == g, (g, seed, result)

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
    assert len(gaps) >= 5
    assert all(g == 7 for g in gaps[:-1]), gaps
    _pass("criterion 3 G-probe",
          "G recovered exactly for G in 1..6 (5 seeds) and the G=3, P=4 "
          "mis-speculation recurs with period 7", started)


def test_criterion_4_extraction_soundness_and_ordering(extraction_bench):
    started = time.time()
    means = {}
    for variant in ("random", "common-words", "feedback-reuse"):
        campaign = extraction_campaign(extraction_bench, variant,
                                       budget=2000, seeds=(0, 1, 2))
        assert campaign["sound"], f"{variant} leaked a non-store sequence"
        means[variant] = campaign["mean_final_unique"]
    assert means["feedback-reuse"] >= means["common-words"] >= means["random"], means
    _pass("criterion 4 extraction",
          "100% soundness; mean unique leaks ordered "
          f"feedback-reuse {means['feedback-reuse']:.0f} >= common-words "
          f"{means['common-words']:.0f} >= random {means['random']:.0f} "
          "at a 2000-query budget, 3 seeds", started)


def test_criterion_5_fingerprint_ceiling_and_floor(bench):
    started = time.time()
    report = fingerprint_experiment(bench, "exact", temperature=0.0, tpq=5,
                                    master_seed=0)
    assert len(report.label_names) == 50
    assert report.accuracy == 1.0, report.accuracy
    shuffled = shuffled_label_control(bench, temperature=0.0, tpq=5,
                                      master_seed=0)
    assert shuffled <= 0.06, shuffled
    _pass("criterion 5 fingerprint ceiling/floor",
          f"exact-knowledge accuracy {report.accuracy:.2f} at temperature "
          f"0; label-shuffled control {shuffled:.3f} <= 0.06", started)


def test_criterion_6_temperature_trend(bench):
    started = time.time()
    means = {}
    for temperature in (0.3, 1.0):
        accs = [fingerprint_experiment(bench, "exact",
                                       temperature=temperature, tpq=5,
                                       master_seed=seed).accuracy
                for seed in range(5)]
        means[temperature] = float(np.mean(accs))
    assert means[1.0] <= means[0.3], means
    _pass("criterion 6 temperature trend",
          f"exact-scenario accuracy {means[1.0]:.3f} at temperature 1.0 <= "
          f"{means[0.3]:.3f} at 0.3 (means over 5 seeds)", started)


def test_criterion_7_constant_padding_kills_channel(sweep_rows):
    started = time.time()
    row = next(r for r in sweep_rows
               if r["policy"]["variant"] == "constant_pad")
    chance = 1.0 / row["n_labels"]
    assert row["accuracy_mean"] <= 2 * chance, row
    _pass("criterion 7 constant padding",
          f"1024-byte padding drives accuracy to {row['accuracy_mean']:.3f} "
          f"<= 2x chance ({2 * chance:.3f})", started)


def _check_monotone(values, tolerance_pp=1.0):
    violations = [(b - a) for a, b in zip(values, values[1:]) if b > a]
    assert len(violations) <= 1, values
    assert all(v <= tolerance_pp / 100 + 1e-9 for v in violations), values


def test_criterion_8_variable_padding_and_aggregation_trends(sweep_rows):
    started = time.time()
    baseline = next(r for r in sweep_rows if r["policy"]["variant"] == "none")
    d_rows = [baseline] + [r for r in sweep_rows
                           if r["policy"]["variant"] == "variable_pad"]
    assert [r["policy"].get("max_pad", 0) for r in d_rows] == [0, 6, 12, 24, 48]
    _check_monotone([r["accuracy_mean"] for r in d_rows])
    overheads = [r["overhead_mean"] for r in d_rows]
    assert all(a < b for a, b in zip(overheads, overheads[1:])), overheads

    k_rows = [baseline] + [r for r in sweep_rows
                           if r["policy"]["variant"] == "aggregate"]
    assert [r["policy"].get("aggregate_k", 1) for r in k_rows] == [1, 3, 5, 10, 20]
    _check_monotone([r["accuracy_mean"] for r in k_rows])
    _pass("criterion 8 variable padding and aggregation trends",
          "accuracy non-increasing across D in {0,6,12,24,48} "
          f"({[round(r['accuracy_mean'], 3) for r in d_rows]}) and "
          "k in {1,3,5,10,20} "
          f"({[round(r['accuracy_mean'], 3) for r in k_rows]}); overhead "
          f"increasing in D ({[round(o, 1) for o in overheads]})", started)


def test_criterion_9_packet_size_proxy(bench):
    started = time.time()
    sizes, counts = [], []
    spec = EngineSpec()
    for prompt in bench.prompts["exact"]:
        log = bench.run(spec, prompt, 0.0, 0)
        sizes.extend(p.observable_size for p in log.packets)
        counts.extend(log.token_counts)
    r = float(np.corrcoef(sizes, counts)[0, 1])
    assert r >= 0.9, r
    _pass("criterion 9 packet-size proxy",
          f"Pearson r = {r:.3f} >= 0.9 between packet sizes and "
          "per-iteration token counts over the 50-prompt benchmark", started)


def test_criterion_10_report_determinism(bench, data_dir):
    started = time.time()
    result = fingerprint_experiment(bench, "exact", temperature=0.3, tpq=2,
                                    master_seed=42)
    first = make_report("fingerprint", result.config, result.to_dict())

    echoed = first["config"]
    rebuilt = Testbed(data_dir, order=echoed["model"]["order"],
                      alpha=echoed["model"]["alpha"],
                      max_tokens=echoed["max_tokens"])
    regenerated = fingerprint_experiment(
        rebuilt, echoed["scenario"], EngineSpec(type=echoed["engine"]["type"],
                                                ngram_size=echoed["engine"]["N"],
                                                guess_set_size=echoed["engine"]["G"]),
        temperature=echoed["temperature"], tpq=echoed["tpq"],
        master_seed=echoed["seed"], test_traces=echoed["test_traces"])
    second = make_report("fingerprint", regenerated.config,
                         regenerated.to_dict())
    assert strip_volatile(first) == strip_volatile(second)
    _pass("criterion 10 determinism",
          "report regenerated from its echoed config is identical "
          "excluding timestamps", started)
