"""Command-line entry points for the full pipeline.

Every subcommand takes a single JSON config file plus a few flag overrides,
writes its artifacts under the output directory, and records a manifest of
the config, seeds, and input-file hashes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import embeddings, explain, harness, injector, model as model_mod, spans, synth

RATE_LIMIT_ENV = "KBVQA_RESOLVER_RPS"


def _load_run_config(args) -> harness.RunConfig:
    cfg = harness.RunConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "method", None):
        cfg.method = args.method.upper()
    if getattr(args, "link_mode", None):
        cfg.link_mode = args.link_mode.upper()
    return cfg


def _out_dir(cfg: harness.RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_tables(cfg: harness.RunConfig):
    wiki = embeddings.load_table(cfg.wiki_table, default_namespace=embeddings.WORD)
    wp = embeddings.load_table(cfg.wordpiece_table, default_namespace=embeddings.WORDPIECE)
    return wiki, wp


def _resolver(cfg: harness.RunConfig):
    if not cfg.resolver_file:
        return None
    if cfg.resolver_file == "wikipedia:live":
        rps = float(os.environ.get(RATE_LIMIT_ENV, "1.0"))
        return spans.WikipediaSearchResolver(rps=rps)
    return spans.StaticResolver.from_file(cfg.resolver_file)


def _build_spanset(cfg: harness.RunConfig, records, wiki):
    ner = None
    chunker = None
    if cfg.method in (spans.NERPER, spans.NERAGRO) or cfg.method in spans.OKVQA_LEVELS:
        if cfg.gazetteer:
            ner = spans.GazetteerNer.from_file(cfg.gazetteer)
        else:
            ner = spans.GazetteerNer()
        lexicon = None
        if cfg.chunker_lexicon:
            with open(cfg.chunker_lexicon, encoding="utf-8") as fh:
                lexicon = json.load(fh)
        chunker = spans.NounPhraseChunker(lexicon)
    exclusion = spans.load_exclusion_list(cfg.exclusion_list) if cfg.exclusion_list else None
    return spans.build_spanset(
        records,
        cfg.method,
        cfg.link_mode,
        ner=ner,
        chunker=chunker,
        resolver=_resolver(cfg),
        entity_table=wiki,
        exclusion_list=exclusion,
    )


def _assemble(cfg: harness.RunConfig, need_alignment: bool = True):
    """Load every pipeline input a train/eval style command needs."""
    cfg.validate_paths()
    records = harness.load_dataset(cfg.dataset)
    wiki, wp = _load_tables(cfg)
    alignment = None
    if need_alignment and cfg.alignment:
        alignment = embeddings.load_alignment(cfg.alignment)
    store = model_mod.RegionFeatureStore.open(cfg.regions_index, cfg.regions_data)
    spanset = None
    if cfg.method:
        spanset = _build_spanset(cfg, records, wiki)
    builder = harness.SequenceBuilder(
        wordpiece_table=wp, wiki_table=wiki, alignment=alignment, max_len=cfg.max_len
    )
    return records, wiki, wp, alignment, store, spanset, builder


def _write_manifest(cfg: harness.RunConfig, extra_seeds: dict | None = None) -> None:
    seeds = {"seed": cfg.seed}
    seeds.update(extra_seeds or {})
    inputs = [p for p in cfg.required_inputs() + [cfg.alignment] if p and os.path.exists(p)]
    harness.write_manifest(_out_dir(cfg), cfg.to_dict(), seeds, inputs)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    config = synth.SynthConfig(**raw)
    bench = synth.generate_synthetic_dataset(config)
    out = Path(args.out or "synth_out")
    out.mkdir(parents=True, exist_ok=True)

    harness.save_dataset(bench.records, out / "dataset.jsonl")
    embeddings.save_table(bench.wiki_table, out / "wiki_vectors.txt")
    embeddings.save_table(bench.wordpiece_table, out / "wordpiece_vectors.txt")
    model_mod.RegionFeatureStore.write(
        bench.region_features, out / "regions.json", out / "regions.bin"
    )
    run_cfg = harness.RunConfig(
        dataset=str(out / "dataset.jsonl"),
        wiki_table=str(out / "wiki_vectors.txt"),
        wordpiece_table=str(out / "wordpiece_vectors.txt"),
        alignment=str(out / "alignment.txt"),
        regions_index=str(out / "regions.json"),
        regions_data=str(out / "regions.bin"),
        method=spans.META,
        link_mode=spans.LINKS,
        max_len=32,
        seed=config.seed,
        out_dir=str(out / "run"),
        model={
            "text_embed_dim": config.wordpiece_dim,
            "region_feat_dim": config.region_feat_dim,
            "num_regions": config.num_regions,
            "answer_vocab_size": config.num_answer_classes,
            "seed": config.seed,
        },
        train={"seed": config.seed},
    )
    (out / "run_config.json").write_text(
        json.dumps(run_cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    harness.write_manifest(out, asdict(config), {"seed": config.seed}, [])
    print(f"synthetic benchmark written to {out} ({len(bench.records)} records)")
    return 0


def cmd_align(args) -> int:
    cfg = _load_run_config(args)
    wiki, wp = _load_tables(cfg)
    keys = embeddings.shared_vocabulary(wiki, wp)
    alignment = embeddings.learn_alignment(wiki, wp, keys)
    out = _out_dir(cfg)
    path = cfg.alignment or str(out / "alignment.txt")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    embeddings.save_alignment(alignment, path)
    _write_manifest(cfg)
    info = alignment.fit_info
    print(f"alignment ({alignment.target_dim}x{alignment.source_dim}) -> {path}")
    print(f"shared keys: {info['num_shared_keys']}  residual: {info['sum_squared_residual']:.6g}")
    return 0


def cmd_spans(args) -> int:
    cfg = _load_run_config(args)
    records = harness.load_dataset(cfg.dataset)
    wiki, _ = _load_tables(cfg)
    spanset = _build_spanset(cfg, records, wiki)
    out = _out_dir(cfg)
    spans.save_spanset(spanset, out / "spanset.jsonl")
    stats = spans.compute_span_stats(spanset, wiki, len(records))
    (out / "span_stats.json").write_text(
        json.dumps(asdict(stats), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_manifest(cfg)
    print(f"spans -> {out / 'spanset.jsonl'}")
    print(f"ents/q {stats.ents_per_q:.3f}  eberts/q {stats.eberts_per_q:.3f}  "
          f"q w/ eberts {stats.frac_q_with_eberts:.3f}")
    return 0


def cmd_inject(args) -> int:
    cfg = _load_run_config(args)
    records, _, _, _, _, spanset, builder = _assemble(cfg)
    sequences = {r.id: builder.build(r, spanset) for r in records}
    out = _out_dir(cfg)
    injector.save_debug_dump(sequences, out / "sequences.jsonl")
    _write_manifest(cfg)
    print(f"injected sequences -> {out / 'sequences.jsonl'}")
    return 0


def _prepared_splits(cfg: harness.RunConfig):
    records, wiki, wp, alignment, store, spanset, builder = _assemble(cfg)
    train = harness.split_records(records, "train")
    holdout = harness.split_records(records, "holdout")
    test = harness.split_records(records, "test")
    vocab = harness.build_answer_vocab(train)
    prep = lambda rs: harness.prepare_examples(
        rs, builder, store, vocab, spanset, score_mode=cfg.score_mode
    )
    return records, wiki, spanset, vocab, train, holdout, test, prep


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    _, _, _, vocab, train, holdout, test, prep = _prepared_splits(cfg)
    model_cfg = model_mod.ModelConfig(
        **{**cfg.model, "answer_vocab_size": len(vocab), "seed": cfg.seed}
    )
    net = model_mod.init_model(model_cfg, vocab)
    out = _out_dir(cfg)
    train_cfg = model_mod.TrainConfig(
        **{**cfg.train, "seed": cfg.seed, "checkpoint_path": str(out / "checkpoint.pt")}
    )
    metrics = model_mod.finetune(net, prep(train), train_cfg,
                                 eval_examples=prep(test) if test else None)
    (out / "train_metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_manifest(cfg)
    print(f"checkpoint -> {out / 'checkpoint.pt'}")
    if "final_eval_accuracy" in metrics:
        print(f"final eval accuracy: {metrics['final_eval_accuracy']:.4f}")
    return 0


def _load_model(cfg: harness.RunConfig, args) -> model_mod.BimodalModel:
    path = getattr(args, "checkpoint", None) or str(Path(cfg.out_dir) / "checkpoint.pt")
    return model_mod.load_checkpoint(path)


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    records, wiki, spanset, vocab, train, holdout, test, prep = _prepared_splits(cfg)
    net = _load_model(cfg, args)
    eval_records = test or records
    examples = prep(eval_records)
    stats = (
        spans.compute_span_stats(spanset, wiki, len(records)) if spanset is not None else None
    )
    report = harness.evaluate(
        net, eval_records, examples,
        explainers_on=cfg.explainers or args.explainers,
        span_stats=stats,
        metadata={"method": cfg.method, "link_mode": cfg.link_mode, "seed": cfg.seed},
    )
    formats = (args.format,) if args.format else ("md", "csv", "json")
    written = harness.emit_report(report, _out_dir(cfg), formats)
    _write_manifest(cfg)
    print(f"overall accuracy: {report.overall_accuracy:.4f}")
    for fmt, path in written.items():
        print(f"report.{fmt} -> {path}")
    return 0


def cmd_explain(args) -> int:
    cfg = _load_run_config(args)
    records, _, spanset, vocab, train, holdout, test, prep = _prepared_splits(cfg)
    net = _load_model(cfg, args)
    eval_records = test or records
    examples = prep(eval_records)
    method = (args.explainer or "bmgae").upper()
    rows = []
    for record, ex in zip(eval_records, examples):
        ranking, maps = explain.explain_example(net, ex.seq, ex.vis, method)
        regions = explain.region_saliency(maps, net.config.num_regions) if maps else []
        rows.append(explain.explanation_record(record.id, method, ranking, ex.seq, regions))
    out = _out_dir(cfg)
    explain.save_explanations(rows, out / "explanations.jsonl")
    _write_manifest(cfg)
    print(f"explanations -> {out / 'explanations.jsonl'}")
    return 0


def cmd_perturb(args) -> int:
    cfg = _load_run_config(args)
    records, wiki, spanset, vocab, train, holdout, test, prep = _prepared_splits(cfg)
    _, wp = _load_tables(cfg)
    net = _load_model(cfg, args)
    eval_records = test or records
    examples = prep(eval_records)
    fractions = [float(f) for f in (args.fractions or "0,0.25,0.5,1").split(",")]
    method = (args.explainer or "bmgae").upper()
    curve = explain.perturbation_test(net, examples, method, fractions, wp, seed=cfg.seed)
    out = _out_dir(cfg)
    payload = {"method": method, "fractions": {str(f): a for f, a in curve.items()}}
    (out / "perturbation.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_manifest(cfg)
    for f in fractions:
        print(f"mask {harness.perturbation_fraction_label(f):>4}: accuracy {curve[f]:.4f}")
    return 0


def cmd_report(args) -> int:
    with open(args.report, encoding="utf-8") as fh:
        raw = json.load(fh)
    report = harness.EvalReport(
        overall_accuracy=raw["overall_accuracy"],
        mean_top1_logit=raw["mean_top1_logit"],
        num_questions=raw["num_questions"],
        per_type={k: harness.TypeMetrics(**v) for k, v in raw.get("per_type", {}).items()},
        span_stats=(spans.SpanStats(**raw["span_stats"]) if raw.get("span_stats") else None),
        explanation_stats={
            k: harness.ExplanationStats(**v)
            for k, v in raw.get("explanation_stats", {}).items()
        },
        metadata=raw.get("metadata", {}),
    )
    out = Path(args.out or ".")
    formats = (args.format,) if args.format else ("md", "csv", "json")
    written = harness.emit_report(report, out, formats)
    for fmt, path in written.items():
        print(f"report.{fmt} -> {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kbvqa",
        description="Entity knowledge injection and explainability for bi-modal VQA.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra_flags):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--method", default=None,
                       choices=["nerper", "neragro", "meta", "ok13k", "ok4k", "ok2_5k"])
        p.add_argument("--link-mode", dest="link_mode", default=None,
                       choices=["as_is", "links", "noisy"])
        for flag, kwargs in extra_flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth)
    add("align", cmd_align)
    add("spans", cmd_spans)
    add("inject", cmd_inject)
    add("train", cmd_train)
    add("eval", cmd_eval,
        **{"--checkpoint": {"default": None},
           "--explainers": {"action": "store_true"},
           "--format": {"choices": ["md", "csv", "json"], "default": None}})
    add("explain", cmd_explain,
        **{"--checkpoint": {"default": None},
           "--explainer": {"choices": ["bmgae", "trf"], "default": "bmgae"}})
    add("perturb", cmd_perturb,
        **{"--checkpoint": {"default": None},
           "--explainer": {"choices": ["bmgae", "trf", "random"], "default": "bmgae"},
           "--fractions": {"default": None}})

    rp = sub.add_parser("report")
    rp.add_argument("--report", required=True, help="existing report.json")
    rp.add_argument("--out", default=None)
    rp.add_argument("--format", choices=["md", "csv", "json"], default=None)
    rp.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
