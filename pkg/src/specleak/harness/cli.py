"""Command-line surface for the testbed.

Every subcommand reads the shared JSON config (``--config``), applies
``--set key.path=value`` overrides, and writes JSON/CSV artifacts that
embed the effective configuration, so runs can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .. import extraction as extraction_mod
from ..errors import SpecleakError
from ..lm import load_corpus, load_model, save_model, tokenize, train_ngram
from ..observer import capture_tcp, save_traces_csv
from ..stream import serve_tcp
from . import config as cfgmod
from .experiments import (ExtractionBench, Testbed, derive_seed,
                          extraction_campaign, fingerprint_experiment,
                          mitigation_sweep, run_probe_g, run_probe_n,
                          tpq_temperature_grid)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpecleakError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specleak",
        description="speculative-decoding traffic side-channel testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--data-dir", help="bundled data directory")
        p.add_argument("--out-dir", help="output directory")

    p = sub.add_parser("train-lm", help="train and persist an n-gram model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("serve", help="serve one session over TCP loopback")
    common(p)
    p.add_argument("--prompt", required=True, help="prompt text")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--port-file", help="write the bound port here")
    p.add_argument("--log-out", help="write the session log JSON here")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("capture", help="capture a trace from a TCP server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--label", default=None)
    p.add_argument("--out", required=True, help="trace CSV path")
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("attack-fingerprint", help="run a fingerprint scenario")
    common(p)
    p.add_argument("--scenario",
                   choices=["exact", "similar-structure", "approximate"])
    p.add_argument("--grid", action="store_true",
                   help="sweep the TPQ x temperature grid")
    p.set_defaults(func=cmd_attack_fingerprint)

    p = sub.add_parser("attack-extract", help="run the datastore extraction")
    common(p)
    p.add_argument("--strategy",
                   choices=["random", "common-words", "feedback-reuse", "all"])
    p.set_defaults(func=cmd_attack_extract)

    p = sub.add_parser("probe-n", help="recover the lookahead n-gram size")
    common(p)
    p.set_defaults(func=cmd_probe_n)

    p = sub.add_parser("probe-g", help="recover the lookahead guess-set size")
    common(p)
    p.set_defaults(func=cmd_probe_g)

    p = sub.add_parser("mitigate-sweep",
                       help="accuracy/overhead across the mitigation grid")
    common(p)
    p.set_defaults(func=cmd_mitigate_sweep)

    p = sub.add_parser("report", help="validate and render a report")
    p.add_argument("path")
    p.add_argument("--csv", help="flatten tabular results to CSV")
    p.set_defaults(func=cmd_report)

    return parser


def _load(args) -> tuple[dict, Path]:
    cfg = cfgmod.load_config(args.config, args.overrides)
    if getattr(args, "data_dir", None):
        cfg["data_dir"] = args.data_dir
    if getattr(args, "out_dir", None):
        cfg["output_dir"] = args.out_dir
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, out_dir


def _bench(cfg: dict) -> Testbed:
    return Testbed(data_dir=cfg["data_dir"], order=cfg["model"]["order"],
                   alpha=cfg["model"]["alpha"],
                   max_tokens=cfg["session"]["max_tokens"])


def cmd_train_lm(args) -> int:
    vocab, docs = load_corpus(args.corpus)
    model = train_ngram(docs, args.order, args.alpha, vocab)
    save_model(model, args.out)
    reloaded = load_model(args.out)
    assert reloaded.order == model.order
    print(f"trained order-{args.order} model on {len(docs)} documents "
          f"({len(vocab)}-word vocabulary) -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    cfg, out_dir = _load(args)
    bench = _bench(cfg)
    spec = cfgmod.engine_spec(cfg)
    session = bench.session(spec, tokenize(args.prompt, bench.vocab),
                            cfg["sampler"]["temperature"],
                            cfg["sampler"]["seed"],
                            cfgmod.mitigation_policy(cfg))
    handle, port = serve_tcp(session, host=args.host, port=args.port)
    if args.port_file:
        Path(args.port_file).write_text(str(port), encoding="utf-8")
    print(f"serving one session on {args.host}:{port}", flush=True)
    log = handle.join()
    if args.log_out:
        report = cfgmod.make_report("session", cfg, {
            "engine": log.engine, "engine_params": log.engine_params,
            "token_counts": log.token_counts,
            "packet_sizes": [p.observable_size for p in log.packets],
        })
        cfgmod.write_report(report, args.log_out)
    print(f"served {len(log.packets)} packets, "
          f"{len(log.output_tokens)} tokens")
    return 0


def cmd_capture(args) -> int:
    trace = capture_tcp(args.host, args.port, label=args.label)
    save_traces_csv([trace], args.out)
    status = "complete" if trace.complete else "INCOMPLETE"
    print(f"captured {len(trace.samples)} packets ({status}) -> {args.out}")
    return 0


def cmd_attack_fingerprint(args) -> int:
    cfg, out_dir = _load(args)
    if args.scenario:
        cfg["scenario"]["type"] = args.scenario
    bench = _bench(cfg)
    spec = cfgmod.engine_spec(cfg)
    seed = cfg["sampler"]["seed"]
    if args.grid:
        rows = tpq_temperature_grid(
            bench, spec, cfg["scenario"]["type"],
            tuple(cfg["sweep"]["tpq_values"]),
            tuple(cfg["sweep"]["temperatures"]), master_seed=seed)
        report = cfgmod.make_report("fingerprint-grid", cfg, {"grid": rows})
        path = out_dir / "fingerprint_grid.json"
    else:
        result = fingerprint_experiment(
            bench, cfg["scenario"]["type"], spec,
            temperature=cfg["sampler"]["temperature"],
            tpq=cfg["scenario"]["tpq"], master_seed=seed,
            policy=cfgmod.mitigation_policy(cfg),
            forest_cfg=cfgmod.forest_config(cfg, derive_seed(seed, "forest")),
            test_traces=cfg["scenario"]["test_traces"])
        report = cfgmod.make_report("fingerprint", cfg, result.to_dict())
        path = out_dir / f"fingerprint_{cfg['scenario']['type']}.json"
        print(f"scenario={result.scenario} engine={result.engine} "
              f"accuracy={result.accuracy:.3f} macro_f1={result.macro_f1:.3f}")
    cfgmod.write_report(report, path)
    print(f"wrote {path}")
    return 0


def cmd_attack_extract(args) -> int:
    cfg, out_dir = _load(args)
    bench = ExtractionBench(data_dir=cfg["data_dir"])
    strategies = ([args.strategy] if args.strategy and args.strategy != "all"
                  else list(extraction_mod.STRATEGIES))
    results = {}
    for variant in strategies:
        campaign = extraction_campaign(
            bench, variant, cfg["extraction"]["budget"],
            cfg["extraction"]["tokens_per_query"],
            tuple(cfg["extraction"]["seeds"]))
        ledgers = campaign.pop("ledgers")
        results[variant] = campaign
        mean_path = out_dir / f"extract_timeline_{variant}.csv"
        with mean_path.open("w", encoding="utf-8") as fh:
            fh.write("queries,mean_unique_leaks\n")
            for q, mean in campaign["mean_timeline"]:
                fh.write(f"{q},{mean}\n")
        extraction_mod.save_ledger_json(
            ledgers[0], out_dir / f"extract_ledger_{variant}.json",
            vocab=bench.vocab)
        print(f"{variant}: mean unique leaks "
              f"{campaign['mean_final_unique']:.1f} "
              f"(sound={campaign['sound']})")
    for variant in results:
        results[variant] = {k: v for k, v in results[variant].items()
                            if k != "mean_timeline"}
    report = cfgmod.make_report("extraction", cfg, {"strategies": results})
    cfgmod.write_report(report, out_dir / "extraction.json")
    print(f"wrote {out_dir / 'extraction.json'}")
    return 0


def cmd_probe_n(args) -> int:
    cfg, out_dir = _load(args)
    result = run_probe_n(cfg["engine"]["ngram_size"],
                         cfg["engine"]["guess_set_size"],
                         cfg["probe"]["n_upper_bound"],
                         cfg["sampler"]["temperature"],
                         cfg["sampler"]["seed"])
    report = cfgmod.make_report("probe-n", cfg, {
        "recovered": result.recovered, "confidence": result.confidence,
        "conclusive": result.conclusive, "reason": result.reason,
        "evidence": result.evidence})
    cfgmod.write_report(report, out_dir / "probe_n.json")
    print(f"recovered N={result.recovered} "
          f"(confidence {result.confidence:.2f})")
    return 0


def cmd_probe_g(args) -> int:
    cfg, out_dir = _load(args)
    result = run_probe_g(cfg["engine"]["guess_set_size"],
                         cfg["engine"]["ngram_size"],
                         cfg["probe"]["g_upper_bound"],
                         cfg["data_dir"],
                         cfg["sampler"]["temperature"],
                         cfg["sampler"]["seed"])
    report = cfgmod.make_report("probe-g", cfg, {
        "recovered": result.recovered, "confidence": result.confidence,
        "conclusive": result.conclusive, "reason": result.reason,
        "evidence": result.evidence})
    cfgmod.write_report(report, out_dir / "probe_g.json")
    print(f"recovered G={result.recovered} "
          f"(confidence {result.confidence:.2f})")
    return 0


def cmd_mitigate_sweep(args) -> int:
    cfg, out_dir = _load(args)
    bench = _bench(cfg)
    rows = mitigation_sweep(bench, cfgmod.engine_spec(cfg),
                            cfg["scenario"]["type"],
                            temperature=cfg["sampler"]["temperature"],
                            tpq=cfg["scenario"]["tpq"],
                            seeds=tuple(cfg["sweep"]["seeds"]))
    report = cfgmod.make_report("mitigation-sweep", cfg, {"rows": rows})
    cfgmod.write_report(report, out_dir / "mitigation_sweep.json")
    for row in rows:
        print(f"{row['policy']}: accuracy={row['accuracy_mean']:.3f} "
              f"overhead={row['overhead_mean']:.1f}x")
    print(f"wrote {out_dir / 'mitigation_sweep.json'}")
    return 0


def cmd_report(args) -> int:
    report = json.loads(Path(args.path).read_text(encoding="utf-8"))
    cfgmod.validate_report(report)
    print(f"kind: {report['kind']} (tool {report['tool_version']})")
    results = report["results"]
    rows = None
    if report["kind"] == "mitigation-sweep":
        rows = [{"policy": json.dumps(r["policy"], sort_keys=True),
                 "accuracy_mean": r["accuracy_mean"],
                 "overhead_mean": r["overhead_mean"]}
                for r in results["rows"]]
    elif report["kind"] == "fingerprint-grid":
        rows = results["grid"]
    elif report["kind"] == "fingerprint":
        rows = [{"scenario": results["scenario"],
                 "accuracy": results["accuracy"],
                 "macro_f1": results["macro_f1"]}]
    if rows:
        for row in rows:
            print("  " + "  ".join(f"{k}={v}" for k, v in row.items()))
        if args.csv:
            import csv as _csv
            with Path(args.csv).open("w", newline="", encoding="utf-8") as fh:
                writer = _csv.DictWriter(fh, fieldnames=list(rows[0]))
                writer.writeheader()
                writer.writerows(rows)
            print(f"wrote {args.csv}")
    else:
        print(json.dumps(results, indent=2, sort_keys=True)[:2000])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
