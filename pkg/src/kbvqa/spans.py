"""Entity-span construction over question+caption text.

Three extraction pipelines (person-filtered NER, aggressive NER + noun-phrase
chunks, metadata string matching), three link-resolution modes (as-is,
verified links only, noisy search), rule-based filtering tiers for less
entity-centric datasets, and per-dataset span statistics.

The NER provider and link resolver are interfaces; the defaults shipped here
(a gazetteer + capitalized-run tagger, a file-backed resolver) are fully
deterministic so every pipeline stage can be tested hermetically.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Protocol

from .embeddings import ENTITY, EmbeddingTable
from .injector import entity_lookup_key

logger = logging.getLogger(__name__)

# extraction methods
NERPER = "NERPER"
NERAGRO = "NERAGRO"
META = "META"
OK13K = "OK13K"
OK4K = "OK4K"
OK2_5K = "OK2_5K"
METHODS = (NERPER, NERAGRO, META, OK13K, OK4K, OK2_5K)
OKVQA_LEVELS = (OK13K, OK4K, OK2_5K)

# link modes
AS_IS = "AS_IS"
LINKS = "LINKS"
NOISY = "NOISY"
LINK_MODES = (AS_IS, LINKS, NOISY)

# span fields / link statuses
QUESTION = "QUESTION"
CAPTION = "CAPTION"
UNLINKED = "UNLINKED"
VERIFIED = "VERIFIED"
SEARCHED = "SEARCHED"

PERSON_LABELS = {"PERSON", "PER"}

_WORD_RE = re.compile(r"[A-Za-z0-9]+(?:['\-][A-Za-z0-9]+)*")
_SENTENCE_BREAK = (".", "?", "!", ";")


class SpanPipelineError(ValueError):
    """Raised on span-pipeline contract violations."""


@dataclass
class MetaEntity:
    name: str
    wiki_title: str | None = None


@dataclass
class Answer:
    text: str
    weight: float = 1.0


@dataclass
class QuestionRecord:
    """One dataset row: a question, optional caption, image key and answers."""

    id: str
    question: str
    image_ref: str = ""
    caption: str | None = None
    answers: list[Answer] = field(default_factory=list)
    question_types: list[str] = field(default_factory=list)
    meta_entities: list[MetaEntity] = field(default_factory=list)
    split: str = "train"


@dataclass
class EntitySpan:
    """A detected entity mention, with offsets into the composed text."""

    surface: str
    field: str
    char_start: int
    char_end: int
    ner_label: str
    link_status: str = UNLINKED
    wiki_title: str | None = None

    def validate_against(self, composed: str) -> None:
        if not (0 <= self.char_start < self.char_end <= len(composed)):
            raise SpanPipelineError(f"span offsets [{self.char_start},{self.char_end}) out of range")
        if composed[self.char_start:self.char_end] != self.surface:
            raise SpanPipelineError(
                f"surface {self.surface!r} does not match text slice "
                f"{composed[self.char_start:self.char_end]!r}"
            )


@dataclass
class SpanSet:
    """Spans per record for one (method, link_mode) pipeline configuration."""

    method: str
    link_mode: str
    spans_by_record: dict[str, list[EntitySpan]] = field(default_factory=dict)
    composed_text_by_record: dict[str, str] = field(default_factory=dict)


@dataclass
class SpanStats:
    ents_per_q: float
    eberts_per_q: float
    frac_q_with_eberts: float


def compose_text(record: QuestionRecord) -> str:
    """Question, one separator space, then the caption when present."""
    if not record.question:
        raise SpanPipelineError(f"record {record.id!r}: empty question")
    if record.caption:
        return f"{record.question} {record.caption}"
    return record.question


def meta_caption(record: QuestionRecord) -> str | None:
    """Caption with metadata entity names absent from the question prepended."""
    missing = [m.name for m in record.meta_entities if m.name and m.name not in record.question]
    parts = missing + ([record.caption] if record.caption else [])
    if not parts:
        return record.caption
    return "; ".join(parts)


def compose_for_method(record: QuestionRecord, method: str) -> str:
    """Composed text the given extraction method runs over (META may extend the caption)."""
    if method == META:
        caption = meta_caption(record)
        if caption:
            if not record.question:
                raise SpanPipelineError(f"record {record.id!r}: empty question")
            return f"{record.question} {caption}"
    return compose_text(record)


# ---------------------------------------------------------------------------
# NER provider and noun-phrase chunker
# ---------------------------------------------------------------------------

@dataclass
class NerTag:
    start: int
    end: int
    label: str


class NerProvider(Protocol):
    def tag(self, text: str) -> list[NerTag]: ...


def _tokens_with_offsets(text: str) -> list[tuple[int, int, str]]:
    return [(m.start(), m.end(), m.group(0)) for m in _WORD_RE.finditer(text)]


def _adjacent(text: str, prev_end: int, next_start: int) -> bool:
    return text[prev_end:next_start].isspace() and next_start > prev_end


def _sentence_initial(text: str, tokens, i: int) -> bool:
    gap_start = 0 if i == 0 else tokens[i - 1][1]
    gap = text[gap_start:tokens[i][0]]
    return i == 0 or any(p in gap for p in _SENTENCE_BREAK)


def _capitalized_runs(text: str) -> list[tuple[int, int]]:
    """Maximal whitespace-adjacent runs of capitalized tokens; single-token
    runs at sentence starts are discarded (ordinary sentence casing)."""
    tokens = _tokens_with_offsets(text)
    runs: list[tuple[int, int]] = []
    i = 0
    while i < len(tokens):
        if not tokens[i][2][0].isupper():
            i += 1
            continue
        j = i
        while (
            j + 1 < len(tokens)
            and tokens[j + 1][2][0].isupper()
            and _adjacent(text, tokens[j][1], tokens[j + 1][0])
        ):
            j += 1
        if j > i or not _sentence_initial(text, tokens, i):
            runs.append((tokens[i][0], tokens[j][1]))
        i = j + 1
    return runs


def _select_non_overlapping(candidates: list[tuple[int, int, str, int]]) -> list[NerTag]:
    """Longest span wins; ties broken by earlier start, then source priority."""
    chosen: list[NerTag] = []
    taken: list[tuple[int, int]] = []
    for start, end, label, _prio in sorted(
        candidates, key=lambda c: (-(c[1] - c[0]), c[0], c[3])
    ):
        if any(start < e and s < end for s, e in taken):
            continue
        taken.append((start, end))
        chosen.append(NerTag(start, end, label))
    chosen.sort(key=lambda t: t.start)
    return chosen


class GazetteerNer:
    """Deterministic tagger: a phrase gazetteer plus a capitalized-run heuristic.

    Gazetteer phrases match token-wise, case-folded; heuristic runs are
    labeled MISC. External taggers can replace this behind ``NerProvider``.
    """

    def __init__(self, gazetteer: dict[str, str] | None = None, use_capitalized_runs: bool = True):
        self.use_capitalized_runs = use_capitalized_runs
        self._phrases: list[tuple[tuple[str, ...], str]] = []
        for phrase, label in (gazetteer or {}).items():
            toks = tuple(t.lower() for t in _WORD_RE.findall(phrase))
            if toks:
                self._phrases.append((toks, label))
        self._phrases.sort(key=lambda p: (-len(p[0]), p[0]))

    @classmethod
    def from_file(cls, path, **kwargs) -> "GazetteerNer":
        """Load a gazetteer file of tab-separated ``phrase<TAB>label`` lines."""
        gaz = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                phrase, _, label = line.partition("\t")
                gaz[phrase] = label or "MISC"
        return cls(gaz, **kwargs)

    def tag(self, text: str) -> list[NerTag]:
        tokens = _tokens_with_offsets(text)
        folded = [t[2].lower() for t in tokens]
        candidates: list[tuple[int, int, str, int]] = []
        for phrase, label in self._phrases:
            n = len(phrase)
            for i in range(len(tokens) - n + 1):
                if tuple(folded[i:i + n]) != phrase:
                    continue
                if any(
                    not _adjacent(text, tokens[k][1], tokens[k + 1][0])
                    for k in range(i, i + n - 1)
                ):
                    continue
                candidates.append((tokens[i][0], tokens[i + n - 1][1], label, 0))
        if self.use_capitalized_runs:
            for start, end in _capitalized_runs(text):
                candidates.append((start, end, "MISC", 1))
        return _select_non_overlapping(candidates)


class NounPhraseChunker:
    """Noun-phrase chunks from capitalized runs plus determiner+noun patterns
    over a small POS lexicon (word -> DET | ADJ | NOUN)."""

    DETERMINERS = {"the", "a", "an", "this", "that", "these", "those"}

    def __init__(self, lexicon: dict[str, str] | None = None, use_capitalized_runs: bool = True):
        self.lexicon = {k.lower(): v for k, v in (lexicon or {}).items()}
        self.use_capitalized_runs = use_capitalized_runs

    def _pos(self, token: str) -> str | None:
        t = token.lower()
        if t in self.DETERMINERS:
            return "DET"
        return self.lexicon.get(t)

    def chunk(self, text: str) -> list[tuple[int, int]]:
        tokens = _tokens_with_offsets(text)
        chunks: list[tuple[int, int]] = []
        i = 0
        while i < len(tokens):
            if self._pos(tokens[i][2]) != "DET":
                i += 1
                continue
            j = i
            last_noun = None
            while (
                j + 1 < len(tokens)
                and self._pos(tokens[j + 1][2]) in ("ADJ", "NOUN")
                and _adjacent(text, tokens[j][1], tokens[j + 1][0])
            ):
                j += 1
                if self._pos(tokens[j][2]) == "NOUN":
                    last_noun = j
            if last_noun is not None:
                chunks.append((tokens[i][0], tokens[last_noun][1]))
                i = last_noun + 1
            else:
                i += 1
        if self.use_capitalized_runs:
            chunks.extend(_capitalized_runs(text))
        return chunks


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

def _field_for(record: QuestionRecord, start: int) -> str:
    return QUESTION if start < len(record.question) else CAPTION


def _substring_matches(haystack: str, needle: str, offset: int = 0) -> list[tuple[int, int]]:
    """All non-overlapping occurrences, left to right."""
    out = []
    pos = 0
    while True:
        hit = haystack.find(needle, pos)
        if hit < 0:
            break
        out.append((offset + hit, offset + hit + len(needle)))
        pos = hit + len(needle)
    return out


def extract_spans(
    record: QuestionRecord,
    method: str,
    ner: NerProvider | None = None,
    chunker: NounPhraseChunker | None = None,
) -> list[EntitySpan]:
    """Run one extraction pipeline over the record's composed text.

    NERPER keeps NER spans with person labels; NERAGRO unions unfiltered NER
    spans with noun-phrase chunks (longest wins on overlap); META string-
    matches metadata entity names over the question and prepends missing ones
    to the caption before matching there.
    """
    if method not in (NERPER, NERAGRO, META):
        raise SpanPipelineError(f"extract_spans does not handle method {method!r}")
    composed = compose_for_method(record, method)

    if method == META:
        title_by_name = {m.name: m.wiki_title for m in record.meta_entities if m.name}
        candidates: list[tuple[int, int, str, int]] = []
        for m in record.meta_entities:
            if not m.name:
                continue
            hits = _substring_matches(record.question, m.name)
            if not hits:
                # the name was prepended to the caption by compose_for_method
                cap_offset = len(record.question) + 1
                hits = _substring_matches(composed[cap_offset:], m.name, cap_offset)
            candidates.extend((s, e, "META", 0) for s, e in hits)
        tags = _select_non_overlapping(candidates)
        spans = [
            EntitySpan(
                surface=composed[t.start:t.end],
                field=_field_for(record, t.start),
                char_start=t.start,
                char_end=t.end,
                ner_label="META",
                wiki_title=title_by_name.get(composed[t.start:t.end]),
            )
            for t in tags
        ]
    elif method == NERPER:
        if ner is None:
            raise SpanPipelineError("NERPER requires an NER provider")
        tags = [t for t in ner.tag(composed) if t.label in PERSON_LABELS]
        spans = [
            EntitySpan(
                surface=composed[t.start:t.end],
                field=_field_for(record, t.start),
                char_start=t.start,
                char_end=t.end,
                ner_label=t.label,
            )
            for t in tags
        ]
    else:  # NERAGRO
        if ner is None:
            raise SpanPipelineError("NERAGRO requires an NER provider")
        candidates = [(t.start, t.end, t.label, 0) for t in ner.tag(composed)]
        if chunker is not None:
            candidates.extend((s, e, "NP", 1) for s, e in chunker.chunk(composed))
        tags = _select_non_overlapping(candidates)
        spans = [
            EntitySpan(
                surface=composed[t.start:t.end],
                field=_field_for(record, t.start),
                char_start=t.start,
                char_end=t.end,
                ner_label=t.label,
            )
            for t in tags
        ]

    for span in spans:
        span.validate_against(composed)
    return spans


# ---------------------------------------------------------------------------
# Link resolution
# ---------------------------------------------------------------------------

class ResolverError(RuntimeError):
    """Transport-level resolver failure (never aborts a batch)."""


class LinkResolver(Protocol):
    def search(self, query: str) -> str | None: ...


class StaticResolver:
    """Offline resolver over a fixed query -> title mapping; the test default."""

    def __init__(self, mapping: dict[str, str] | None = None):
        self.mapping = dict(mapping or {})

    @classmethod
    def from_file(cls, path) -> "StaticResolver":
        mapping = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    mapping[row["query"]] = row["title"]
        return cls(mapping)

    def search(self, query: str) -> str | None:
        return self.mapping.get(query)


class RateLimiter:
    """Serializes calls to at most ``rps`` per second."""

    def __init__(self, rps: float):
        if rps <= 0:
            raise ValueError("rps must be positive")
        self.min_interval = 1.0 / rps
        self._last = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        with self._lock:
            now = time.monotonic()
            delay = self._last + self.min_interval - now
            if delay > 0:
                time.sleep(delay)
                now = time.monotonic()
            self._last = now


class WikipediaSearchResolver:
    """Live title search against the Wikipedia API, rate limited.

    Not used by any test; the offline ``StaticResolver`` stands in for it.
    """

    ENDPOINT = "https://en.wikipedia.org/w/api.php"

    def __init__(self, rps: float = 1.0, timeout: float = 10.0):
        self.limiter = RateLimiter(rps)
        self.timeout = timeout

    def search(self, query: str) -> str | None:
        import requests

        self.limiter.wait()
        try:
            resp = requests.get(
                self.ENDPOINT,
                params={"action": "opensearch", "search": query, "limit": 1, "format": "json"},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            titles = resp.json()[1]
        except Exception as exc:  # noqa: BLE001 - any transport failure
            raise ResolverError(str(exc)) from exc
        return titles[0] if titles else None


class CachedResolver:
    """Disk-cached resolver wrapper, keyed by exact query string.

    Cache rows are JSONL ``{query, title, timestamp}``; misses are cached too
    (title null) so repeated failures do not re-query. Writes are serialized;
    reads share the in-memory view.
    """

    def __init__(self, inner: LinkResolver, cache_path):
        self.inner = inner
        self.cache_path = cache_path
        self._lock = threading.Lock()
        self._cache: dict[str, str | None] = {}
        try:
            with open(cache_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self._cache[row["query"]] = row["title"]
        except FileNotFoundError:
            pass

    def search(self, query: str) -> str | None:
        if query in self._cache:
            return self._cache[query]
        title = self.inner.search(query)
        with self._lock:
            self._cache[query] = title
            with open(self.cache_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(
                    {"query": query, "title": title, "timestamp": time.time()}
                ) + "\n")
        return title


def resolve_links(
    spans: list[EntitySpan],
    mode: str,
    resolver: LinkResolver | None = None,
    entity_table: EmbeddingTable | None = None,
    counters: dict | None = None,
) -> list[EntitySpan]:
    """Resolve wiki links for a record's spans under one of three modes.

    AS_IS passes spans through. LINKS keeps only spans already carrying a
    wiki title or whose titlecased surface is an entity-table key (VERIFIED).
    NOISY keeps everything, additionally searching the resolver for spans
    still unlinked (SEARCHED on success). Resolver failures leave the span
    UNLINKED and bump ``counters['resolver_failures']``; they never abort.
    """
    if mode not in LINK_MODES:
        raise SpanPipelineError(f"unknown link mode {mode!r}")
    if mode == AS_IS:
        return [replace(s) for s in spans]

    out: list[EntitySpan] = []
    for span in spans:
        if span.wiki_title:
            out.append(replace(span, link_status=VERIFIED))
            continue
        key = entity_lookup_key(span.surface)
        if entity_table is not None and entity_table.has(ENTITY, key):
            out.append(replace(span, link_status=VERIFIED, wiki_title=key))
            continue
        if mode == LINKS:
            continue  # drop unverifiable spans
        title = None
        if resolver is not None:
            try:
                title = resolver.search(span.surface)
            except Exception as exc:  # noqa: BLE001 - transport failures tolerated
                if counters is not None:
                    counters["resolver_failures"] = counters.get("resolver_failures", 0) + 1
                logger.warning("resolver failed for %r: %s", span.surface, exc)
        if title:
            out.append(replace(span, link_status=SEARCHED, wiki_title=title))
        else:
            out.append(replace(span))
    return out


# ---------------------------------------------------------------------------
# Rule-based filtering tiers
# ---------------------------------------------------------------------------

@dataclass
class OkvqaRuleset:
    """Declarative span-rejection rules for the semi-automated filtering tier."""

    stopwords: set[str] = field(default_factory=set)
    generic_nouns: set[str] = field(default_factory=set)
    generic_labels: set[str] = field(default_factory=set)
    min_chars: int = 2

    @classmethod
    def from_file(cls, path) -> "OkvqaRuleset":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            stopwords={w.lower() for w in raw.get("stopwords", [])},
            generic_nouns={w.lower() for w in raw.get("generic_nouns", [])},
            generic_labels=set(raw.get("generic_labels", [])),
            min_chars=int(raw.get("min_chars", 2)),
        )

    @classmethod
    def default(cls) -> "OkvqaRuleset":
        from importlib.resources import files

        return cls.from_file(files("kbvqa.data") / "ok4k_rules.json")

    def rejects(self, span: EntitySpan) -> bool:
        if len(span.surface) < self.min_chars:
            return True
        if span.ner_label in self.generic_labels:
            return True
        tokens = [t.lower() for t in _WORD_RE.findall(span.surface)]
        if not tokens or all(t in self.stopwords for t in tokens):
            return True
        content = [t for t in tokens if t not in self.stopwords]
        return len(content) == 1 and content[0] in self.generic_nouns


def load_exclusion_list(path) -> set[str]:
    """One lowercased surface per line."""
    with open(path, encoding="utf-8") as fh:
        return {line.strip().lower() for line in fh if line.strip()}


def filter_okvqa(
    spans: list[EntitySpan],
    level: str,
    ruleset: OkvqaRuleset | None = None,
    exclusion_list: set[str] | None = None,
) -> list[EntitySpan]:
    """Apply the tiered filtering: passthrough, rules, rules + manual list."""
    if level not in OKVQA_LEVELS:
        raise SpanPipelineError(f"unknown filtering level {level!r}")
    if level == OK13K:
        return list(spans)
    if ruleset is None:
        ruleset = OkvqaRuleset.default()
    kept = [s for s in spans if not ruleset.rejects(s)]
    if level == OK4K:
        return kept
    if exclusion_list is None:
        raise SpanPipelineError("manual exclusion list required for the strictest tier")
    return [s for s in kept if s.surface.lower() not in exclusion_list]


# ---------------------------------------------------------------------------
# Statistics and persistence
# ---------------------------------------------------------------------------

def span_resolvable(span: EntitySpan, entity_table: EmbeddingTable) -> bool:
    """Whether the span maps to an injectable entity vector."""
    if span.wiki_title and entity_table.has(ENTITY, span.wiki_title):
        return True
    return entity_table.has(ENTITY, entity_lookup_key(span.surface))


def compute_span_stats(
    spanset: SpanSet, entity_table: EmbeddingTable, num_records: int
) -> SpanStats:
    """Spans per question, injectable entities per question, and the fraction
    of questions carrying at least one injectable span."""
    if num_records <= 0:
        raise SpanPipelineError("num_records must be positive")
    total = 0
    resolvable = 0
    records_with = 0
    for spans in spanset.spans_by_record.values():
        total += len(spans)
        n_res = sum(1 for s in spans if span_resolvable(s, entity_table))
        resolvable += n_res
        if n_res:
            records_with += 1
    return SpanStats(
        ents_per_q=total / num_records,
        eberts_per_q=resolvable / num_records,
        frac_q_with_eberts=records_with / num_records,
    )


def save_spanset(spanset: SpanSet, path) -> None:
    """JSONL, one record per line, byte-stable for identical inputs."""
    with open(path, "w", encoding="utf-8") as fh:
        for record_id, spans in spanset.spans_by_record.items():
            row = {
                "record_id": record_id,
                "method": spanset.method,
                "link_mode": spanset.link_mode,
                "spans": [
                    {
                        "surface": s.surface,
                        "field": s.field,
                        "char_start": s.char_start,
                        "char_end": s.char_end,
                        "ner_label": s.ner_label,
                        "link_status": s.link_status,
                        "wiki_title": s.wiki_title,
                    }
                    for s in spans
                ],
            }
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")


def load_spanset(path, records: list[QuestionRecord] | None = None) -> SpanSet:
    """Inverse of :func:`save_spanset`; composed texts are rebuilt when the
    source records are supplied."""
    spanset: SpanSet | None = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if spanset is None:
                spanset = SpanSet(method=row["method"], link_mode=row["link_mode"])
            spanset.spans_by_record[row["record_id"]] = [
                EntitySpan(
                    surface=s["surface"],
                    field=s["field"],
                    char_start=s["char_start"],
                    char_end=s["char_end"],
                    ner_label=s["ner_label"],
                    link_status=s["link_status"],
                    wiki_title=s.get("wiki_title"),
                )
                for s in row["spans"]
            ]
    if spanset is None:
        raise SpanPipelineError(f"{path}: empty span set file")
    if records is not None:
        for record in records:
            if record.id in spanset.spans_by_record:
                spanset.composed_text_by_record[record.id] = compose_for_method(
                    record, spanset.method
                )
    return spanset


def build_spanset(
    records: list[QuestionRecord],
    method: str,
    link_mode: str,
    ner: NerProvider | None = None,
    chunker: NounPhraseChunker | None = None,
    resolver: LinkResolver | None = None,
    entity_table: EmbeddingTable | None = None,
    ruleset: OkvqaRuleset | None = None,
    exclusion_list: set[str] | None = None,
    counters: dict | None = None,
) -> SpanSet:
    """Run extraction, link resolution, and (for the tiered levels) filtering
    over a whole dataset."""
    if method not in METHODS:
        raise SpanPipelineError(f"unknown method {method!r}")
    spanset = SpanSet(method=method, link_mode=link_mode)
    for record in records:
        if method in OKVQA_LEVELS:
            # unfiltered NER spans feed every tier; the tiers only filter
            base = extract_spans(record, NERAGRO, ner=ner, chunker=None)
            spans = filter_okvqa(base, method, ruleset=ruleset, exclusion_list=exclusion_list)
        else:
            spans = extract_spans(record, method, ner=ner, chunker=chunker)
        spans = resolve_links(
            spans, link_mode, resolver=resolver, entity_table=entity_table, counters=counters
        )
        spanset.spans_by_record[record.id] = spans
        spanset.composed_text_by_record[record.id] = compose_for_method(record, method)
    return spanset
