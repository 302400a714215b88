"""Command-line interface.

Subcommands: gen-data, train, score, eval, ablate.  Every command is
deterministic given its flags; seeds land in the emitted metadata.  Errors
leave a machine-readable JSON object on stderr and a nonzero exit code.
A JSON config file can preload any long-form option; explicit flags win.
The BOOTTAG_OUT environment variable supplies the default output
directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from dataclasses import asdict
from pathlib import Path

from . import bootstrap, datagen, evaluation, uncertainty
from .bootstrap import TrainConfig, run_bootstrap, train_baseline
from .datagen import default_grammar, inject_noise, instances_from_corpus, load_corpus, load_grammar
from .encoder import TokenVocabulary
from .model import load_checkpoint, save_checkpoint
from .uncertainty import McConfig, score_dataset, write_scores_csv

log = logging.getLogger("boottag")

VARIANTS = ("baseline", "ws-pv", "entropy-pv", "ws-pv-ensembled", "entropy-pv-ensembled")


class CliError(Exception):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # machine-readable usage errors
        print(json.dumps({"error": message, "type": "usage"}), file=sys.stderr)
        raise SystemExit(2)


def _default_out(value, fallback: str) -> Path:
    if value is not None:
        return Path(value)
    base = os.environ.get("BOOTTAG_OUT")
    return Path(base) / fallback if base else Path(fallback)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as handle:
        loaded = json.load(handle)
    if not isinstance(loaded, dict):
        raise CliError(f"{path}: config file must hold a JSON object")
    return loaded


def _merged(args: argparse.Namespace, keys: list[str]) -> dict:
    """Config-file values for `keys`, overridden by explicitly set flags."""
    merged = dict(_load_config_file(getattr(args, "config", None)))
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


TRAIN_KEYS = [
    "alpha", "lr", "batch_size", "dropout", "tau_d", "tau_m", "k", "epochs",
    "patience", "seed", "width", "warm_subsample", "external_scores",
]


def _train_config(options: dict, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise CliError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    ensembled = variant.endswith("-ensembled")
    alpha = float(options.get("alpha", 1.0)) if ensembled else 0.0
    if ensembled and alpha <= 0:
        raise CliError(f"variant {variant!r} needs alpha > 0")
    kind = "entropy" if variant.startswith("entropy") else "ws"
    seed = int(options.get("seed", 1))
    return TrainConfig(
        alpha=alpha,
        learning_rate=float(options.get("lr", 1e-3)),
        batch_size=int(options.get("batch_size", 8)),
        dropout_rate=float(options.get("dropout", 0.1)),
        tau_d=1.0 if variant == "baseline" else float(options.get("tau_d", 0.5)),
        tau_m=1.0 if variant == "baseline" else float(options.get("tau_m", 0.6)),
        k_passes=int(options.get("k", 5)),
        max_epochs=int(options.get("epochs", 20)),
        patience=int(options.get("patience", 3)),
        seed_init=seed,
        seed_dropout=seed + 1,
        seed_shuffle=seed + 2,
        data_uncertainty=kind,
        width=int(options.get("width", 24)),
        warm_subsample=int(options.get("warm_subsample", 1000)),
        external_scores_path=options.get("external_scores"),
    )


def _load_training_inputs(corpus_path, val_path, provenance_path=None):
    corpus = load_corpus(corpus_path)
    val_corpus = load_corpus(val_path)
    if corpus.entity_types != val_corpus.entity_types or corpus.relation_types != val_corpus.relation_types:
        raise CliError("training and validation corpora disagree on type inventories")
    vocab = corpus.tag_vocabulary()
    records = None
    sidecar = Path(provenance_path) if provenance_path else Path(str(corpus_path) + ".prov.jsonl")
    if sidecar.exists():
        records = datagen.load_provenance(sidecar)
    instances = instances_from_corpus(corpus, vocab, records)
    provenance_map = {i.instance_id: i.provenance for i in instances} if records else None
    token_vocab = TokenVocabulary.from_corpus(corpus.sentences)
    return corpus, val_corpus, vocab, token_vocab, instances, provenance_map


def _run_one_training(variant: str, config: TrainConfig, inputs, out_dir: Path) -> dict:
    corpus, val_corpus, vocab, token_vocab, instances, provenance_map = inputs
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    runner_args = (instances, val_corpus.sentences, token_vocab, vocab, config)
    kwargs = {"provenance": provenance_map, "metrics_path": metrics_path}
    if variant == "baseline":
        result = train_baseline(*runner_args, **kwargs)
    else:
        result = run_bootstrap(*runner_args, **kwargs)

    config_hash = config.config_hash()
    save_checkpoint(result.model, out_dir / "best.npz", config_hash=config_hash)
    save_checkpoint(result.last_model, out_dir / "last.npz", config_hash=config_hash)
    audit = evaluation.selection_audit(result.state, provenance_map)
    (out_dir / "selection_audit.json").write_text(json.dumps(audit, indent=2) + "\n")
    resolved = {"variant": variant, "config": asdict(config), "config_hash": config_hash}
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2) + "\n")
    final_enrichment = None
    if audit["available"] and audit["iterations"]:
        final_enrichment = audit["iterations"][-1]["enrichment"]
    summary = {
        "variant": variant,
        "best_epoch": result.best_epoch,
        "best_val_f1": result.best_f1,
        "epochs_run": len(result.metrics),
        "final_enrichment": final_enrichment,
        "diverged": result.diverged,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_gen_data(args) -> int:
    grammar = default_grammar() if args.grammar in (None, "default") else load_grammar(args.grammar)
    corpus = datagen.generate_corpus(grammar, args.size, args.seed)
    noise = datagen.NoiseSpec(relation_rate=args.noise_rel, entity_rate=args.noise_ent, seed=args.seed)
    noisy, records, report = inject_noise(corpus, noise)
    out = _default_out(args.out, "corpus.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    datagen.save_corpus(noisy, out)
    datagen.save_provenance(records, str(out) + ".prov.jsonl")
    print(
        json.dumps(
            {
                "out": str(out),
                "sentences": report.n_sentences,
                "corrupted_fraction": report.corrupted_fraction,
                "realized_relation_rate": report.realized_relation_rate,
                "realized_entity_rate": report.realized_entity_rate,
                "seed": args.seed,
            }
        )
    )
    return 0


def cmd_train(args) -> int:
    options = _merged(args, TRAIN_KEYS)
    config = _train_config(options, args.variant)
    inputs = _load_training_inputs(args.corpus, args.val, args.provenance)
    out_dir = _default_out(args.out, f"run-{args.variant}")
    summary = _run_one_training(args.variant, config, inputs, out_dir)
    print(json.dumps(summary))
    if summary["diverged"]:
        print(json.dumps({"error": "training diverged; last good state saved", "type": "diverged"}), file=sys.stderr)
        return 3
    return 0


def cmd_score(args) -> int:
    corpus = load_corpus(args.corpus)
    model = load_checkpoint(args.model)
    if model.tag_vocab != corpus.tag_vocabulary():
        raise CliError("checkpoint tag vocabulary does not match the corpus")
    records = None
    sidecar = Path(str(args.corpus) + ".prov.jsonl")
    if sidecar.exists():
        records = datagen.load_provenance(sidecar)
    instances = instances_from_corpus(corpus, model.tag_vocab, records)
    mc = McConfig(k=args.k, seed=args.seed) if args.kind == "pv" else None
    scores = score_dataset(model, instances, args.kind, mc)
    out = _default_out(args.out, f"scores-{args.kind}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores_csv(scores, instances, out)
    print(json.dumps({"out": str(out), "instances": len(scores), "kind": args.kind}))
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    model = load_checkpoint(args.model)
    if model.tag_vocab != corpus.tag_vocabulary():
        raise CliError("checkpoint tag vocabulary does not match the corpus")
    report = evaluation.evaluate(model, corpus.sentences, model.tag_vocab)
    out = _default_out(args.out, "eval.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    print(report.format_table())
    return 0


def cmd_ablate(args) -> int:
    if args.matrix != "default":
        raise CliError(f"unknown ablation matrix {args.matrix!r}")
    options = _merged(args, TRAIN_KEYS)
    inputs = _load_training_inputs(args.corpus, args.val, None)
    out_dir = _default_out(args.out, "ablation")
    out_dir.mkdir(parents=True, exist_ok=True)
    base_seed = int(options.get("seed", 1))
    rows = []
    summaries: dict[str, list[dict]] = {v: [] for v in VARIANTS}
    for offset in range(args.seeds):
        seed = base_seed + offset
        for variant in VARIANTS:
            config = _train_config({**options, "seed": seed}, variant)
            run_dir = out_dir / f"{variant}-s{seed}"
            summary = _run_one_training(variant, config, inputs, run_dir)
            summaries[variant].append(summary)
            with open(run_dir / "metrics.jsonl") as handle:
                for line in handle:
                    row = json.loads(line)
                    rows.append((variant, seed, row["epoch"], row["val_f1"]))
            log.info("ablate: %s seed %d best F1 %.4f", variant, seed, summary["best_val_f1"])
    with open(out_dir / "ablation_f1.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["variant", "seed", "epoch", "val_f1"])
        writer.writerows(rows)
    combined = {}
    for variant, runs in summaries.items():
        f1s = [r["best_val_f1"] for r in runs]
        enrich = [r["final_enrichment"] for r in runs if r["final_enrichment"] is not None]
        combined[variant] = {
            "best_val_f1": f1s,
            "median_best_val_f1": statistics.median(f1s),
            "final_enrichment": enrich,
            "median_final_enrichment": statistics.median(enrich) if enrich else None,
        }
    (out_dir / "summary.json").write_text(json.dumps(combined, indent=2) + "\n")
    print(json.dumps({"out": str(out_dir), "variants": {v: combined[v]["median_best_val_f1"] for v in VARIANTS}}))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="boottag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus with injected noise")
    p.add_argument("--grammar", default=None, help="grammar JSON path, or 'default'")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--noise-rel", type=float, default=0.0)
    p.add_argument("--noise-ent", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--corpus", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--tau-d", dest="tau_d", type=float, default=None)
    p.add_argument("--tau-m", dest="tau_m", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--warm-subsample", dest="warm_subsample", type=int, default=None)
    p.add_argument("--external-scores", dest="external_scores", default=None)
    p.add_argument("--provenance", default=None, help="provenance sidecar path")
    p.add_argument("--config", default=None, help="JSON config file; flags override")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="dump uncertainty scores to CSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--kind", required=True, choices=["ws", "entropy", "pv"])
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the default variant matrix under shared seeds")
    p.add_argument("--corpus", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--matrix", default="default")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--tau-d", dest="tau_d", type=float, default=None)
    p.add_argument("--tau-m", dest="tau_m", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--warm-subsample", dest="warm_subsample", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return getattr(exc, "exit_code", 1)


if __name__ == "__main__":
    sys.exit(main())
