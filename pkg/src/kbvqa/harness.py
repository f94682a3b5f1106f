"""Dataset ingestion, evaluation metrics, confidence gating, and reports.

Everything downstream of a trained model lives here: answer scoring and
normalization, per-question-type accuracy with confidence, explanation-rate
statistics, aggregation across runs, and byte-stable report emission in
markdown, CSV, and JSON.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import statistics
from dataclasses import asdict, dataclass, field

import numpy as np

from .embeddings import AlignmentMap, EmbeddingTable
from .explain import BMGAE, TRF, entity_in_topk, explain_bmgae, explain_trf, top_tokens
from .injector import InjectedSequence, inject, tokenize_baseline
from .model import (
    BimodalModel,
    RegionFeatureStore,
    TrainingExample,
    attention_gradients,
    predict_batch,
)
from .spans import (
    Answer,
    MetaEntity,
    QuestionRecord,
    SpanSet,
    SpanStats,
    compose_for_method,
    compose_text,
)

EXACT = "EXACT"
SOFT = "SOFT"

# the open question-type tag set; datasets may carry any strings
KNOWN_QUESTION_TYPES = (
    "1-hop", "multi-hop", "multi-rel", "bool", "multi-entity",
    "cmp", "spatial", "subtr", "count", "inter",
)

_ARTICLES = {"a", "an", "the"}


class DatasetError(ValueError):
    """Raised on dataset schema violations, with the offending line."""


# ---------------------------------------------------------------------------
# Dataset IO
# ---------------------------------------------------------------------------

def _record_from_row(row: dict, lineno: int) -> QuestionRecord:
    for name in ("id", "question"):
        if name not in row or not isinstance(row[name], str) or not row[name]:
            raise DatasetError(f"line {lineno}: missing or empty field {name!r}")
    answers = []
    for a in row.get("answers", []):
        if "text" not in a:
            raise DatasetError(f"line {lineno}: answer without text")
        weight = float(a.get("weight", 1.0))
        if not 0 < weight <= 1:
            raise DatasetError(f"line {lineno}: answer weight {weight} outside (0, 1]")
        answers.append(Answer(text=a["text"], weight=weight))
    if not answers:
        raise DatasetError(f"line {lineno}: record {row['id']!r} has no answers")
    return QuestionRecord(
        id=row["id"],
        question=row["question"],
        caption=row.get("caption"),
        image_ref=row.get("image_ref", ""),
        answers=answers,
        question_types=list(row.get("question_types", [])),
        meta_entities=[
            MetaEntity(name=m["name"], wiki_title=m.get("wiki_title"))
            for m in row.get("meta_entities", [])
        ],
        split=row.get("split", "train"),
    )


def load_dataset(path) -> list[QuestionRecord]:
    """Read a JSONL dataset, validating the schema row by row."""
    records: list[QuestionRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc})") from None
            record = _record_from_row(row, lineno)
            if record.id in seen:
                raise DatasetError(f"line {lineno}: duplicate id {record.id!r}")
            seen.add(record.id)
            records.append(record)
    return records


def save_dataset(records: list[QuestionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = {
                "id": r.id,
                "question": r.question,
                "caption": r.caption,
                "image_ref": r.image_ref,
                "answers": [{"text": a.text, "weight": a.weight} for a in r.answers],
                "question_types": r.question_types,
                "meta_entities": [
                    {"name": m.name, "wiki_title": m.wiki_title} for m in r.meta_entities
                ],
                "split": r.split,
            }
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")


def split_records(records: list[QuestionRecord], split: str) -> list[QuestionRecord]:
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------------------
# Answer scoring
# ---------------------------------------------------------------------------

def normalize_answer(text: str, enabled: bool = True) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    if not enabled:
        return text
    lowered = text.lower()
    cleaned = "".join(ch if ch.isalnum() or ch.isspace() else " " for ch in lowered)
    words = [w for w in cleaned.split() if w not in _ARTICLES]
    return " ".join(words)


def score_answer(prediction: str, answers: list[Answer], mode: str = EXACT,
                 normalize: bool = True) -> float:
    """Score one predicted answer string against the reference answers.

    EXACT: 1 iff the normalized prediction equals any answer. SOFT: the
    consensus score min(matching annotators / 3, 1), reading each answer
    weight as a tenth of the annotator pool.
    """
    if not answers:
        raise DatasetError("empty answer list")
    pred = normalize_answer(prediction, normalize)
    matches = [a for a in answers if normalize_answer(a.text, normalize) == pred]
    if mode == EXACT:
        return 1.0 if matches else 0.0
    if mode == SOFT:
        annotators = sum(a.weight * 10.0 for a in matches)
        return min(annotators / 3.0, 1.0)
    raise DatasetError(f"unknown scoring mode {mode!r}")


def build_answer_vocab(records: list[QuestionRecord], max_size: int | None = None,
                       normalize: bool = True) -> list[str]:
    """Answer vocabulary from training answers: frequency then alphabetical."""
    counts: dict[str, int] = {}
    for r in records:
        for a in r.answers:
            key = normalize_answer(a.text, normalize)
            if key:
                counts[key] = counts.get(key, 0) + 1
    vocab = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        vocab = vocab[:max_size]
    if not vocab:
        raise DatasetError("empty answer vocabulary")
    return vocab


# ---------------------------------------------------------------------------
# Example preparation
# ---------------------------------------------------------------------------

@dataclass
class SequenceBuilder:
    """Turns records (plus an optional span set) into injected sequences."""

    wordpiece_table: EmbeddingTable
    wiki_table: EmbeddingTable | None = None
    alignment: AlignmentMap | None = None
    max_len: int = 32

    def build(self, record: QuestionRecord, spanset: SpanSet | None = None) -> InjectedSequence:
        if spanset is None:
            return tokenize_baseline(compose_text(record), self.wordpiece_table, self.max_len)
        text = spanset.composed_text_by_record.get(record.id)
        if text is None:
            text = compose_for_method(record, spanset.method)
        spans = spanset.spans_by_record.get(record.id, [])
        if self.alignment is None or self.wiki_table is None:
            raise DatasetError("injection requires a wiki table and an alignment")
        return inject(text, spans, self.alignment, self.wiki_table,
                      self.wordpiece_table, self.max_len)


def prepare_examples(
    records: list[QuestionRecord],
    builder: SequenceBuilder,
    store: RegionFeatureStore,
    answer_vocab: list[str],
    spanset: SpanSet | None = None,
    score_mode: str = EXACT,
    normalize: bool = True,
) -> list[TrainingExample]:
    """Build model-ready examples: sequences, visuals, targets, and the score
    each vocabulary entry would earn if predicted."""
    vocab_index = {v: i for i, v in enumerate(answer_vocab)}
    examples = []
    for record in records:
        seq = builder.build(record, spanset)
        vis = store.get(record.image_ref)
        eval_scores = np.array(
            [score_answer(v, record.answers, score_mode, normalize) for v in answer_vocab]
        )
        best = max(record.answers, key=lambda a: a.weight)
        target_index = vocab_index.get(normalize_answer(best.text, normalize))
        dist = np.zeros(len(answer_vocab))
        for a in record.answers:
            idx = vocab_index.get(normalize_answer(a.text, normalize))
            if idx is not None:
                dist[idx] += a.weight
        target_dist = dist / dist.sum() if dist.sum() > 0 else None
        examples.append(TrainingExample(
            record_id=record.id,
            seq=seq,
            vis=vis,
            target_index=target_index,
            target_dist=target_dist,
            eval_scores=eval_scores,
        ))
    return examples


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class TypeMetrics:
    fraction_of_questions: float
    accuracy: float
    mean_top1_logit: float


@dataclass
class ExplanationStats:
    top1_rate: float
    top5_rate: float
    top10_rate: float
    accuracy_given_entity_in_top5: float
    fraction_questions_entity_in_top5: float


@dataclass
class EvalReport:
    overall_accuracy: float
    mean_top1_logit: float
    num_questions: int
    per_type: dict[str, TypeMetrics] = field(default_factory=dict)
    span_stats: SpanStats | None = None
    explanation_stats: dict[str, ExplanationStats] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    model: BimodalModel,
    records: list[QuestionRecord],
    examples: list[TrainingExample],
    explainers_on: bool = False,
    span_stats: SpanStats | None = None,
    metadata: dict | None = None,
) -> EvalReport:
    """Overall and per-type accuracy with raw top-1 logit confidence; when
    explainers are on, entity-prominence rates for both relevancy methods.

    ``records`` and ``examples`` must be index-aligned. A question counts
    toward every one of its type tags.
    """
    if not examples:
        raise DatasetError("empty evaluation set")
    logits = predict_batch(model, examples)
    preds = logits.argmax(axis=1)
    top1 = logits.max(axis=1)
    scores = np.array([ex.eval_scores[p] for ex, p in zip(examples, preds)])

    by_type: dict[str, list[int]] = {}
    for i, record in enumerate(records):
        for tag in record.question_types:
            by_type.setdefault(tag, []).append(i)
    per_type = {
        tag: TypeMetrics(
            fraction_of_questions=len(idx) / len(examples),
            accuracy=float(scores[idx].mean()),
            mean_top1_logit=float(top1[idx].mean()),
        )
        for tag, idx in sorted(by_type.items())
    }

    explanation_stats: dict[str, ExplanationStats] = {}
    if explainers_on:
        hits = {BMGAE: {1: [], 5: [], 10: []}, TRF: {1: [], 5: [], 10: []}}
        acc_top5: dict[str, list[float]] = {BMGAE: [], TRF: []}
        for i, ex in enumerate(examples):
            trace, grads = attention_gradients(model, ex.seq, ex.vis, int(preds[i]))
            rankings = {
                BMGAE: top_tokens(explain_bmgae(trace, grads), ex.seq, len(ex.seq)),
                TRF: top_tokens(explain_trf(trace, grads), ex.seq, len(ex.seq)),
            }
            for method, ranking in rankings.items():
                for k in (1, 5, 10):
                    hits[method][k].append(entity_in_topk(ranking, ex.seq, k))
                if entity_in_topk(ranking, ex.seq, 5):
                    acc_top5[method].append(float(scores[i]))
        for method in (BMGAE, TRF):
            in5 = hits[method][5]
            explanation_stats[method] = ExplanationStats(
                top1_rate=float(np.mean(hits[method][1])),
                top5_rate=float(np.mean(in5)),
                top10_rate=float(np.mean(hits[method][10])),
                accuracy_given_entity_in_top5=(
                    float(np.mean(acc_top5[method])) if acc_top5[method] else 0.0
                ),
                fraction_questions_entity_in_top5=float(np.mean(in5)),
            )

    return EvalReport(
        overall_accuracy=float(scores.mean()),
        mean_top1_logit=float(top1.mean()),
        num_questions=len(examples),
        per_type=per_type,
        span_stats=span_stats,
        explanation_stats=explanation_stats,
        metadata=metadata or {},
    )


# ---------------------------------------------------------------------------
# Confidence-gated injection
# ---------------------------------------------------------------------------

@dataclass
class PredictionSet:
    """Per-example correctness scores and raw top-1 logits for one model."""

    scores: np.ndarray
    top1_logits: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.top1_logits = np.asarray(self.top1_logits, dtype=np.float64)
        if self.scores.shape != self.top1_logits.shape:
            raise DatasetError("scores and logits must align")


@dataclass
class GatingResult:
    threshold: float
    holdout_accuracy: float
    test_accuracy: float
    use_injected: np.ndarray


def prediction_set(model: BimodalModel, examples: list[TrainingExample]) -> PredictionSet:
    logits = predict_batch(model, examples)
    preds = logits.argmax(axis=1)
    return PredictionSet(
        scores=np.array([ex.eval_scores[p] for ex, p in zip(examples, preds)]),
        top1_logits=logits.max(axis=1),
    )


def _gated_accuracy(base: PredictionSet, injected: PredictionSet, threshold: float) -> float:
    use = injected.top1_logits > threshold
    return float(np.where(use, injected.scores, base.scores).mean())


def confidence_gated_injection(
    baseline_holdout: PredictionSet,
    injected_holdout: PredictionSet,
    baseline_test: PredictionSet,
    injected_test: PredictionSet,
) -> GatingResult:
    """Pick the logit threshold on the holdout that maximizes the rule 'use
    the injected prediction iff its top-1 logit clears the threshold', then
    apply it to the test set.

    The candidate set includes the always-injected and always-baseline rules,
    so holdout gated accuracy never falls below either input.
    """
    if baseline_holdout.scores.size == 0:
        raise DatasetError("empty holdout")
    candidates = [-np.inf] + sorted(set(injected_holdout.top1_logits.tolist()))
    best_t, best_acc = None, -1.0
    for t in candidates:
        acc = _gated_accuracy(baseline_holdout, injected_holdout, t)
        if acc > best_acc:
            best_t, best_acc = t, acc
    use = injected_test.top1_logits > best_t
    return GatingResult(
        threshold=float(best_t),
        holdout_accuracy=best_acc,
        test_accuracy=float(np.where(use, injected_test.scores, baseline_test.scores).mean()),
        use_injected=use,
    )


# ---------------------------------------------------------------------------
# Aggregation across runs
# ---------------------------------------------------------------------------

def _numeric_leaves(obj, prefix="") -> dict[str, float]:
    out: dict[str, float] = {}
    if isinstance(obj, dict):
        for key, value in obj.items():
            out.update(_numeric_leaves(value, f"{prefix}{key}."))
    elif isinstance(obj, bool):
        pass
    elif isinstance(obj, (int, float)):
        out[prefix[:-1]] = float(obj)
    return out


def aggregate_runs(reports: list[EvalReport | dict]) -> dict[str, dict[str, float]]:
    """Sample statistics per numeric metric across runs (std uses n-1)."""
    if not reports:
        raise DatasetError("no reports to aggregate")
    flats = [
        _numeric_leaves(r.to_dict() if isinstance(r, EvalReport) else r) for r in reports
    ]
    keys = sorted(set.intersection(*(set(f) for f in flats)))
    out: dict[str, dict[str, float]] = {}
    single = len(reports) == 1
    for key in keys:
        values = [f[key] for f in flats]
        out[key] = {
            "mean": statistics.fmean(values),
            "std": statistics.stdev(values) if len(values) > 1 else 0.0,
            "max": max(values),
            "median": statistics.median(values),
            "single_run": single,
        }
    return out


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

TABLE1_COLUMNS = ["Model", "Type", "Acc", "ents per Q", "eberts per Q", "Qs w/ eberts"]
TABLE3_ROWS = ["Percent with", "Accuracy", "Mean top-1 logit"]
TABLE4_COLUMNS = ["Model", "Type", "BM Acc", "BM Qs", "TRF Acc", "TRF Qs"]
TABLE5_COLUMNS = ["Model", "Type", "BM top1", "BM top5", "BM top10",
                  "TRF top1", "TRF top5", "TRF top10", "Qs w/ eberts"]


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def _md_table(header: list[str], rows: list[list]) -> str:
    lines = ["| " + " | ".join(header) + " |",
             "| " + " | ".join("---" for _ in header) + " |"]
    lines += ["| " + " | ".join(_fmt(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def report_markdown(report: EvalReport) -> str:
    """Markdown tables mirroring the overall, per-type, explanation-accuracy
    and explanation-rate schemas."""
    meta = report.metadata
    model_name = meta.get("method", "baseline") or "baseline"
    link_mode = meta.get("link_mode", "-") or "-"
    ss = report.span_stats
    sections = ["# Evaluation report", ""]

    sections.append("## Overall")
    sections.append(_md_table(
        TABLE1_COLUMNS,
        [[model_name, link_mode, report.overall_accuracy,
          ss.ents_per_q if ss else "-", ss.eberts_per_q if ss else "-",
          ss.frac_q_with_eberts if ss else "-"]],
    ))
    sections.append("")

    types = list(report.per_type)
    sections.append("## By question type")
    rows = [
        ["Percent with"] + [report.per_type[t].fraction_of_questions for t in types] + ["-"],
        ["Accuracy"] + [report.per_type[t].accuracy for t in types]
        + [report.overall_accuracy],
        ["Mean top-1 logit"] + [report.per_type[t].mean_top1_logit for t in types]
        + [report.mean_top1_logit],
    ]
    sections.append(_md_table([""] + types + ["Acc / Conf"], rows))
    sections.append("")

    if report.explanation_stats:
        bm = report.explanation_stats.get(BMGAE)
        trf = report.explanation_stats.get(TRF)
        sections.append("## Accuracy when an injected entity is a top-5 token")
        sections.append(_md_table(TABLE4_COLUMNS, [[
            model_name, link_mode,
            bm.accuracy_given_entity_in_top5 if bm else "-",
            bm.fraction_questions_entity_in_top5 if bm else "-",
            trf.accuracy_given_entity_in_top5 if trf else "-",
            trf.fraction_questions_entity_in_top5 if trf else "-",
        ]]))
        sections.append("")
        sections.append("## Injected-entity rates in top-k tokens")
        sections.append(_md_table(TABLE5_COLUMNS, [[
            model_name, link_mode,
            bm.top1_rate if bm else "-", bm.top5_rate if bm else "-",
            bm.top10_rate if bm else "-",
            trf.top1_rate if trf else "-", trf.top5_rate if trf else "-",
            trf.top10_rate if trf else "-",
            ss.frac_q_with_eberts if ss else "-",
        ]]))
        sections.append("")
    return "\n".join(sections)


def _flatten(obj, prefix="") -> list[tuple[str, object]]:
    if isinstance(obj, dict):
        out = []
        for key in obj:
            out.extend(_flatten(obj[key], f"{prefix}{key}." if prefix else f"{key}."))
        return out
    return [(prefix[:-1], obj)]


def report_csv_rows(report: EvalReport) -> list[tuple[str, str]]:
    return [(key, json.dumps(value)) for key, value in _flatten(report.to_dict())]


def report_from_csv(path) -> dict:
    """Rebuild the nested report dict from the flat CSV (lossless)."""
    out: dict = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for key, encoded in csv.reader(fh):
            parts = key.split(".")
            node = out
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = json.loads(encoded)
    return out


def emit_report(report: EvalReport, out_dir, formats=("md", "csv", "json")) -> dict[str, str]:
    """Write report files; identical reports produce identical bytes."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    if "json" in formats:
        path = out_dir / "report.json"
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        written["json"] = str(path)
    if "csv" in formats:
        path = out_dir / "report.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerows(report_csv_rows(report))
        written["csv"] = str(path)
    if "md" in formats:
        path = out_dir / "report.md"
        path.write_text(report_markdown(report), encoding="utf-8")
        written["md"] = str(path)
    return written


# ---------------------------------------------------------------------------
# Run configuration and manifests
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, config: dict, seeds: dict, input_paths: list) -> str:
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256_file(p) for p in input_paths},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return str(path)


@dataclass
class RunConfig:
    """One experiment's inputs and knobs, loadable from a JSON config file."""

    dataset: str = ""
    wiki_table: str = ""
    wordpiece_table: str = ""
    alignment: str = ""
    regions_index: str = ""
    regions_data: str = ""
    method: str | None = None
    link_mode: str = "AS_IS"
    max_len: int = 32
    score_mode: str = EXACT
    explainers: bool = False
    seed: int = 0
    out_dir: str = "runs/out"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    gazetteer: str | None = None
    chunker_lexicon: str | None = None
    resolver_file: str | None = None
    exclusion_list: str | None = None

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise DatasetError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def required_inputs(self) -> list[str]:
        paths = [self.dataset, self.wiki_table, self.wordpiece_table,
                 self.regions_index, self.regions_data]
        return [p for p in paths if p]

    def validate_paths(self) -> None:
        import os

        missing = [p for p in self.required_inputs() if not os.path.exists(p)]
        if missing:
            raise DatasetError(f"missing input paths: {missing}")


def perturbation_fraction_label(f: float) -> str:
    return f"{int(round(100 * f))}%" if not math.isnan(f) else "nan"
