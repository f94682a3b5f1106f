"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with output enabled to see the lines:

    pytest tests/test_acceptance.py -s
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from kbvqa import explain as X
from kbvqa import harness as H
from kbvqa import model as M
from kbvqa import spans as S
from kbvqa import synth
from kbvqa.embeddings import (
    ENTITY,
    WORD,
    WORDPIECE,
    EmbeddingTable,
    learn_alignment,
    load_table,
    map_entity,
    shared_vocabulary,
)
from kbvqa.injector import (
    KIND_ENTITY,
    KIND_WORDPIECE,
    SEPARATOR,
    SPECIAL,
    inject,
    tokenize_baseline,
)

from reference_explainers import random_trace, reference_bmgae, reference_trf
from test_model import make_example, make_seq, make_vis, tiny_config

GOLDEN = Path(__file__).parent / "golden"


def report_line(num, name, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\n[ACCEPTANCE {num}] {name}: {status} ({detail})")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------
# 1. Alignment correctness
# ---------------------------------------------------------------------------

def test_criterion_1_alignment_correctness():
    t0 = time.monotonic()
    rng = np.random.default_rng(101)
    worst_rel = 0.0
    for ds, dt in [(16, 24), (48, 32), (64, 64)]:
        n = 4 * ds
        Xm = rng.normal(size=(n, ds))
        W_star = rng.normal(size=(dt, ds))
        Ym = Xm @ W_star.T
        src = EmbeddingTable(dim=ds, cased=False)
        tgt = EmbeddingTable(dim=dt, cased=False)
        keys = []
        for i in range(n):
            key = f"k{i}"
            src.add(WORD, key, Xm[i])
            tgt.add(WORDPIECE, key, Ym[i])
            keys.append(key)
        fit = learn_alignment(src, tgt, keys)
        rel = np.linalg.norm(fit.matrix - W_star) / np.linalg.norm(W_star)
        worst_rel = max(worst_rel, rel)
        lhs = np.linalg.norm(Xm.T @ (Xm @ fit.matrix.T - Ym))
        bound = 1e-8 * (1 + np.linalg.norm(Xm) * np.linalg.norm(Ym))
        assert lhs <= bound, "normal-equation residual check failed"
    elapsed = time.monotonic() - t0
    ok = worst_rel <= 1e-6 and elapsed < 5.0
    report_line(1, "alignment correctness",
                ok, f"worst rel err {worst_rel:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. Gradient fidelity
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_fidelity():
    import torch

    t0 = time.monotonic()
    cfg = tiny_config()  # minimal config, float64, zero dropout
    model = M.init_model(cfg)
    seq, vis = make_seq(dim=cfg.text_embed_dim), make_vis(cfg)
    target = 2
    trace, grads = M.attention_gradients(model, seq, vis, target)

    eps = 1e-4
    worst_attn = 0.0
    site_grads = {
        "lang_0": grads.grad_lang[0],
        "vis_0": grads.grad_vis[0],
        "x_tv_0": grads.grad_cross_tv[0],
        "x_vt_0": grads.grad_cross_vt[0],
        "x_lang_self_0": grads.grad_lang[cfg.lang_layers],
    }
    rng = np.random.default_rng(0)
    for site, g in site_grads.items():
        flat = np.argsort(np.abs(g).ravel())
        picks = {np.unravel_index(flat[-1], g.shape),
                 np.unravel_index(flat[-2], g.shape),
                 np.unravel_index(int(rng.integers(g.size)), g.shape)}
        for h, i, j in picks:
            def bump(delta, h=h, i=i, j=j):
                def hook(probs):
                    p = probs.clone()
                    p[0, h, i, j] = p[0, h, i, j] + delta
                    return p
                return hook

            model.set_attention_hook(site, bump(+eps))
            f_plus, _ = M.forward(model, seq, vis)
            model.set_attention_hook(site, bump(-eps))
            f_minus, _ = M.forward(model, seq, vis)
            model.clear_attention_hooks()
            fd = (f_plus[target] - f_minus[target]) / (2 * eps)
            got = g[h, i, j]
            if max(abs(fd), abs(got)) < 1e-12:
                continue
            worst_attn = max(worst_attn, abs(fd - got) / max(abs(fd), abs(got)))
    assert worst_attn <= 1e-3, f"attention FD error {worst_attn:.2e}"

    examples = [make_example(cfg, seed=s, target=s % cfg.answer_vocab_size) for s in range(3)]
    loss = M.training_loss(model, examples)
    model.zero_grad()
    loss.backward()
    params = list(model.named_parameters())
    h_step = 1e-5
    worst_param = 0.0
    checked = 0
    rng = np.random.default_rng(1)
    while checked < 24:
        name, p = params[int(rng.integers(len(params)))]
        idx = np.unravel_index(int(rng.integers(p.numel())), p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h_step
            f_plus = float(M.training_loss(model, examples).detach())
            p[idx] = orig - h_step
            f_minus = float(M.training_loss(model, examples).detach())
            p[idx] = orig
        fd = (f_plus - f_minus) / (2 * h_step)
        got = float(p.grad[idx]) if p.grad is not None else 0.0
        if max(abs(fd), abs(got)) < 1e-12:
            continue
        worst_param = max(worst_param, abs(fd - got) / max(abs(fd), abs(got)))
        checked += 1
    elapsed = time.monotonic() - t0
    ok = worst_attn <= 1e-3 and worst_param <= 1e-4 and elapsed < 60.0
    report_line(2, "gradient fidelity", ok,
                f"attn rel {worst_attn:.2e}, param rel {worst_param:.2e} over {checked}, "
                f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. Explainer oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_3_explainer_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(50):
        trace, grads = random_trace(
            rng,
            t_len=int(rng.integers(2, 7)),
            i_len=int(rng.integers(2, 6)),
            heads=int(rng.integers(1, 4)),
            lang=int(rng.integers(1, 3)),
            vis=int(rng.integers(1, 3)),
            cross=int(rng.integers(0, 3)),
        )
        maps = X.explain_bmgae(trace, grads)
        ref_tt, ref_ti, ref_it, ref_ii = reference_bmgae(trace, grads)
        for got, ref in ((maps.R_tt, ref_tt), (maps.R_ti, ref_ti),
                         (maps.R_it, ref_it), (maps.R_ii, ref_ii)):
            if got.size:
                worst = max(worst, float(np.abs(got - ref).max()))
        worst = max(worst, float(np.abs(
            X.explain_trf(trace, grads) - reference_trf(trace, grads)
        ).max()))

    trace, grads = random_trace(rng, grad_scale=0.0)
    maps = X.explain_bmgae(trace, grads)
    exact = (
        np.array_equal(maps.R_tt, np.eye(maps.R_tt.shape[0]))
        and np.array_equal(maps.R_ti, np.zeros_like(maps.R_ti))
        and np.array_equal(X.explain_trf(trace, grads), np.eye(maps.R_tt.shape[0]))
    )
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-10 and exact and elapsed < 30.0
    report_line(3, "explainer oracle equivalence", ok,
                f"max |prod - oracle| {worst:.2e}, zero-grad exact {exact}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4 + 5. Synthetic injection benefit and perturbation faithfulness
# ---------------------------------------------------------------------------

def _train_pair(seed):
    scfg = synth.SynthConfig(seed=seed)  # 1000 train / 200 holdout / 200 test, 8 classes
    bench = synth.generate_synthetic_dataset(scfg)
    keys = shared_vocabulary(bench.wiki_table, bench.wordpiece_table)
    alignment = learn_alignment(bench.wiki_table, bench.wordpiece_table, keys)
    spanset = S.build_spanset(bench.records, S.META, S.LINKS, entity_table=bench.wiki_table)
    builder = H.SequenceBuilder(bench.wordpiece_table, bench.wiki_table, alignment, max_len=32)

    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        M.RegionFeatureStore.write(bench.region_features,
                                   f"{tmp}/ri.json", f"{tmp}/rd.bin")
        store = M.RegionFeatureStore.open(f"{tmp}/ri.json", f"{tmp}/rd.bin")
        train_r = H.split_records(bench.records, "train")
        test_r = H.split_records(bench.records, "test")
        vocab = H.build_answer_vocab(train_r)
        mc = M.ModelConfig(
            hidden_dim=64, num_heads=4, answer_vocab_size=len(vocab),
            text_embed_dim=scfg.wordpiece_dim, region_feat_dim=scfg.region_feat_dim,
            num_regions=scfg.num_regions, seed=seed,
        )
        out = {"bench": bench, "test_records": test_r}
        for tag, ss in (("injected", spanset), ("baseline", None)):
            net = M.init_model(mc, vocab)
            train_ex = H.prepare_examples(train_r, builder, store, vocab, ss)
            test_ex = H.prepare_examples(test_r, builder, store, vocab, ss)
            metrics = M.finetune(net, train_ex, M.TrainConfig(epochs=12, seed=seed),
                                 eval_examples=test_ex)
            out[tag] = {"model": net, "test": test_ex,
                        "accuracy": metrics["final_eval_accuracy"]}
        return out


@pytest.fixture(scope="module")
def injection_runs():
    t0 = time.monotonic()
    runs = [_train_pair(seed) for seed in (0, 1, 2)]
    return runs, time.monotonic() - t0


def test_criterion_4_synthetic_injection_benefit(injection_runs):
    runs, elapsed = injection_runs
    margins = []
    chance_gaps = []
    for run in runs:
        margins.append(run["injected"]["accuracy"] - run["baseline"]["accuracy"])
        # entity-keyed subset: baseline is pinned near chance by construction
        ent_idx = [i for i, r in enumerate(run["test_records"])
                   if r.question_types == [synth.ENTITY_TYPE_TAG]]
        base_logits = M.predict_batch(run["baseline"]["model"], run["baseline"]["test"])
        preds = base_logits.argmax(axis=1)
        ent_acc = float(np.mean([
            run["baseline"]["test"][i].eval_scores[preds[i]] for i in ent_idx
        ]))
        chance_gaps.append(ent_acc - 1.0 / 8.0)
    mean_margin = float(np.mean(margins))
    ok = mean_margin >= 0.20 and elapsed < 600.0 and max(chance_gaps) < 0.15
    report_line(4, "synthetic injection benefit", ok,
                f"margin {100 * mean_margin:.1f} pts over 3 seeds "
                f"(per-seed {[f'{100 * m:.1f}' for m in margins]}), "
                f"baseline entity-subset within {max(chance_gaps):.3f} of chance, "
                f"{elapsed:.0f}s")


def test_criterion_5_perturbation_faithfulness(injection_runs):
    runs, _ = injection_runs
    t0 = time.monotonic()
    run = runs[0]
    model = run["injected"]["model"]
    examples = run["injected"]["test"]
    table = run["bench"].wordpiece_table

    bm = X.perturbation_test(model, examples, X.BMGAE, [0.25], table)[0.25]
    random_accs = [
        X.perturbation_test(model, examples, X.RANDOM, [0.25], table, seed=s)[0.25]
        for s in range(5)
    ]
    margin = float(np.mean(random_accs)) - bm
    elapsed = time.monotonic() - t0
    ok = margin > 0.0 and elapsed < 300.0
    report_line(5, "perturbation faithfulness", ok,
                f"relevancy-masked acc {bm:.3f} vs random mean "
                f"{np.mean(random_accs):.3f}, margin +{margin:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. Span-pipeline fidelity
# ---------------------------------------------------------------------------

def test_criterion_6_span_pipeline_fidelity(tmp_path):
    t0 = time.monotonic()
    records = H.load_dataset(GOLDEN / "corpus.jsonl")
    assert len(records) == 50
    table = load_table(GOLDEN / "entity_vectors.txt")
    ner = S.GazetteerNer.from_file(GOLDEN / "gazetteer.tsv")
    chunker = S.NounPhraseChunker(json.loads((GOLDEN / "chunker_lexicon.json").read_text()))
    resolver = S.StaticResolver.from_file(GOLDEN / "resolver.jsonl")
    exclusion = S.load_exclusion_list(GOLDEN / "exclusion.txt")

    grid = [(m, lm) for m in (S.NERPER, S.NERAGRO, S.META)
            for lm in (S.AS_IS, S.LINKS, S.NOISY)]
    grid += [(lvl, S.AS_IS) for lvl in (S.OK13K, S.OK4K, S.OK2_5K)]

    stats = {}
    spansets = {}
    mismatches = []
    for method, mode in grid:
        spanset = S.build_spanset(records, method, mode, ner=ner, chunker=chunker,
                                  resolver=resolver, entity_table=table,
                                  exclusion_list=exclusion)
        name = f"{method.lower()}_{mode.lower()}"
        spansets[(method, mode)] = spanset
        out = tmp_path / f"{name}.jsonl"
        S.save_spanset(spanset, out)
        if out.read_bytes() != (GOLDEN / "spansets" / f"{name}.jsonl").read_bytes():
            mismatches.append(name)
        s = S.compute_span_stats(spanset, table, len(records))
        stats[name] = {"ents_per_q": s.ents_per_q, "eberts_per_q": s.eberts_per_q,
                       "frac_q_with_eberts": s.frac_q_with_eberts}
    stats_bytes = (json.dumps(stats, indent=2, sort_keys=True) + "\n").encode()
    if stats_bytes != (GOLDEN / "stats.json").read_bytes():
        mismatches.append("stats.json")

    # subset relations per record
    def surfaces(ss, rid):
        return sorted((sp.char_start, sp.char_end) for sp in ss.spans_by_record[rid])

    subset_ok = True
    for method in (S.NERPER, S.NERAGRO, S.META):
        links = spansets[(method, S.LINKS)]
        as_is = spansets[(method, S.AS_IS)]
        for rid in links.spans_by_record:
            if not set(surfaces(links, rid)) <= set(surfaces(as_is, rid)):
                subset_ok = False
    ok13, ok4, ok25 = (spansets[(lvl, S.AS_IS)] for lvl in (S.OK13K, S.OK4K, S.OK2_5K))
    for rid in ok13.spans_by_record:
        if not (set(surfaces(ok25, rid)) <= set(surfaces(ok4, rid))
                <= set(surfaces(ok13, rid))):
            subset_ok = False

    elapsed = time.monotonic() - t0
    ok = not mismatches and subset_ok and elapsed < 10.0
    report_line(6, "span-pipeline fidelity", ok,
                f"{len(grid)} golden files byte-exact"
                f"{'' if not mismatches else ' EXCEPT ' + ','.join(mismatches)}, "
                f"subset relations {'hold' if subset_ok else 'VIOLATED'}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7. Injection structure
# ---------------------------------------------------------------------------

def test_criterion_7_injection_structure():
    from kbvqa.embeddings import AlignmentMap
    from kbvqa.spans import EntitySpan

    t0 = time.monotonic()
    rng = np.random.default_rng(707)
    from conftest import make_table

    words = ["who", "is", "the", "of", "near", "red", "tower", "bridge", "zzq"]
    pieces = ["[CLS]", "[SEP]", "[UNK]", "/", "##er"] + words[:-1]
    wp = make_table(6, pieces=pieces, cased=False, rng=np.random.default_rng(1))
    entities = ["Red Tower", "The Bridge", "Zzq"]
    wiki = make_table(3, entities=entities, rng=np.random.default_rng(2))
    alignment = AlignmentMap(matrix=np.random.default_rng(3).normal(size=(6, 3)),
                             source_dim=3, target_dim=6)

    checked = 0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        toks = [words[int(rng.integers(len(words)))] for _ in range(n)]
        text = " ".join(toks)
        spans = []
        pos = 0
        for tok in toks:
            start = text.index(tok, pos)
            pos = start + len(tok)
            if rng.random() < 0.4:
                end = pos
                if rng.random() < 0.3 and start > 0:
                    start_prev = text.rfind(" ", 0, start - 1)
                    # two-word span when the words are adjacent
                    start = start_prev + 1 if start_prev >= 0 else 0
                spans.append(EntitySpan(
                    surface=text[start:end], field="QUESTION",
                    char_start=start, char_end=end, ner_label="MISC",
                    wiki_title="Red Tower" if rng.random() < 0.2 else None,
                ))
        # drop overlaps introduced by the two-word extension
        spans_clean = []
        last_end = -1
        for sp in sorted(spans, key=lambda s: s.char_start):
            if sp.char_start >= last_end:
                spans_clean.append(sp)
                last_end = sp.char_end
        max_len = int(rng.integers(4, 20))
        seq = inject(text, spans_clean, alignment, wiki, wp, max_len)

        toks_seq = seq.tokens
        assert toks_seq[0].kind == SPECIAL and toks_seq[-1].kind == SPECIAL
        assert len(seq) <= max_len
        for i, tok in enumerate(toks_seq):
            if tok.kind == KIND_ENTITY:
                assert toks_seq[i + 1].kind == SEPARATOR
                assert toks_seq[i + 2].kind == KIND_WORDPIECE
                assert toks_seq[i + 1].span_ref == tok.span_ref
                assert toks_seq[i + 2].span_ref == tok.span_ref
                expected = map_entity(alignment, wiki.get(ENTITY, tok.text))
                assert tok.embedding.tobytes() == expected.tobytes()
            elif tok.kind == KIND_WORDPIECE:
                assert tok.embedding.tobytes() == wp.get(WORDPIECE, tok.text).tobytes()

        base = tokenize_baseline(text, wp, max_len)
        empty = inject(text, [], alignment, wiki, wp, max_len)
        assert empty.texts() == base.texts()
        assert empty.kinds() == base.kinds()
        assert np.array_equal(empty.embedding_matrix(), base.embedding_matrix())
        checked += 1

    elapsed = time.monotonic() - t0
    ok = checked == 1000 and elapsed < 30.0
    report_line(7, "injection structure", ok,
                f"{checked} randomized calls: pattern, provenance and "
                f"baseline equivalence hold, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 8. Harness determinism and schema
# ---------------------------------------------------------------------------

def _full_pipeline(tmp_dir, seed=0):
    Path(tmp_dir).mkdir(parents=True, exist_ok=True)
    scfg = synth.SynthConfig(num_train=300, num_holdout=80, num_test=80,
                             num_answer_classes=4, num_entities=16, seed=seed)
    bench = synth.generate_synthetic_dataset(scfg)
    keys = shared_vocabulary(bench.wiki_table, bench.wordpiece_table)
    alignment = learn_alignment(bench.wiki_table, bench.wordpiece_table, keys)
    spanset = S.build_spanset(bench.records, S.META, S.LINKS, entity_table=bench.wiki_table)
    builder = H.SequenceBuilder(bench.wordpiece_table, bench.wiki_table, alignment, max_len=32)
    M.RegionFeatureStore.write(bench.region_features,
                               f"{tmp_dir}/ri.json", f"{tmp_dir}/rd.bin")
    store = M.RegionFeatureStore.open(f"{tmp_dir}/ri.json", f"{tmp_dir}/rd.bin")
    train_r = H.split_records(bench.records, "train")
    holdout_r = H.split_records(bench.records, "holdout")
    test_r = H.split_records(bench.records, "test")
    vocab = H.build_answer_vocab(train_r)
    mc = M.ModelConfig(hidden_dim=32, num_heads=4, lang_layers=1, vis_layers=1,
                       cross_layers=1, answer_vocab_size=len(vocab),
                       text_embed_dim=scfg.wordpiece_dim,
                       region_feat_dim=scfg.region_feat_dim,
                       num_regions=scfg.num_regions, seed=seed)

    results = {}
    for tag, ss in (("injected", spanset), ("baseline", None)):
        net = M.init_model(mc, vocab)
        train_ex = H.prepare_examples(train_r, builder, store, vocab, ss)
        M.finetune(net, train_ex, M.TrainConfig(epochs=6, seed=seed))
        results[tag] = {
            "model": net,
            "holdout": H.prepare_examples(holdout_r, builder, store, vocab, ss),
            "test": H.prepare_examples(test_r, builder, store, vocab, ss),
        }

    stats = S.compute_span_stats(spanset, bench.wiki_table, len(bench.records))
    report = H.evaluate(
        results["injected"]["model"], test_r, results["injected"]["test"],
        explainers_on=True, span_stats=stats,
        metadata={"method": S.META, "link_mode": S.LINKS, "seed": seed},
    )
    gate = H.confidence_gated_injection(
        H.prediction_set(results["baseline"]["model"], results["baseline"]["holdout"]),
        H.prediction_set(results["injected"]["model"], results["injected"]["holdout"]),
        H.prediction_set(results["baseline"]["model"], results["baseline"]["test"]),
        H.prediction_set(results["injected"]["model"], results["injected"]["test"]),
    )
    holdout_accs = (
        float(H.prediction_set(results["baseline"]["model"],
                               results["baseline"]["holdout"]).scores.mean()),
        float(H.prediction_set(results["injected"]["model"],
                               results["injected"]["holdout"]).scores.mean()),
    )
    return report, gate, holdout_accs


def test_criterion_8_harness_determinism_and_schema(tmp_path):
    t0 = time.monotonic()
    report_a, gate_a, holdout_accs = _full_pipeline(tmp_path / "a")
    report_b, gate_b, _ = _full_pipeline(tmp_path / "b")

    identical = report_a.to_dict() == report_b.to_dict()
    files_a = H.emit_report(report_a, tmp_path / "out_a")
    files_b = H.emit_report(report_b, tmp_path / "out_b")
    bytes_identical = all(
        Path(files_a[f]).read_bytes() == Path(files_b[f]).read_bytes()
        for f in ("md", "csv", "json")
    )

    md = Path(files_a["md"]).read_text()
    required = ["ents per Q", "eberts per Q", "Qs w/ eberts", "Acc / Conf",
                "BM Acc", "BM Qs", "TRF Acc", "TRF Qs",
                "BM top1", "BM top5", "BM top10", "TRF top1", "TRF top5", "TRF top10"]
    schema_ok = all(col in md for col in required)

    dominance = gate_a.holdout_accuracy >= max(holdout_accs) - 1e-12
    elapsed = time.monotonic() - t0
    ok = identical and bytes_identical and schema_ok and dominance and elapsed < 300.0
    report_line(8, "harness determinism and schema", ok,
                f"reports identical {identical}, bytes identical {bytes_identical}, "
                f"schema complete {schema_ok}, gating {gate_a.holdout_accuracy:.3f} >= "
                f"max{holdout_accs}, {elapsed:.0f}s")
