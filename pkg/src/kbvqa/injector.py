"""Embedding-level knowledge injection into the input token sequence.

For every resolvable entity span, the injected sequence carries the aligned
entity vector, then a slash separator, then the ordinary wordpieces of the
surface; text outside spans tokenizes as usual. Spans that miss the entity
table degrade silently to plain wordpieces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .embeddings import ENTITY, WORDPIECE, AlignmentMap, EmbeddingTable, map_entity

START_TOKEN = "[CLS]"
END_TOKEN = "[SEP]"
UNK_TOKEN = "[UNK]"
SEPARATOR_TEXT = "/"
CONTINUATION = "##"

# token kinds
SPECIAL = "SPECIAL"
KIND_WORDPIECE = "WORDPIECE"
SEPARATOR = "SEPARATOR"
KIND_ENTITY = "ENTITY"


class InjectionError(ValueError):
    """Raised on injector contract violations."""


@dataclass
class Token:
    text: str
    kind: str
    embedding: np.ndarray
    span_ref: int | None = None


@dataclass
class InjectedSequence:
    """Ordered embedding-level tokens, bounded by start/end specials."""

    tokens: list[Token]
    truncated: bool
    max_len: int
    entity_misses: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    def kinds(self) -> list[str]:
        return [t.kind for t in self.tokens]

    def embedding_matrix(self) -> np.ndarray:
        return np.stack([t.embedding for t in self.tokens])


def entity_lookup_key(surface: str) -> str:
    """Titlecase each whitespace-separated word: uppercase initial, rest lowered.

    Applied literally, so all-caps acronyms come out as e.g. "Un"; misses
    from that are surfaced through the sequence's entity_misses counter.
    """
    if not surface.strip():
        raise InjectionError("empty entity surface")
    return " ".join(w[0].upper() + w[1:].lower() for w in surface.split())


def _basic_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace, with punctuation as its own token."""
    tokens: list[str] = []
    word: list[str] = []
    for ch in text.lower():
        if ch.isalnum():
            word.append(ch)
            continue
        if word:
            tokens.append("".join(word))
            word = []
        if not ch.isspace():
            tokens.append(ch)
    if word:
        tokens.append("".join(word))
    return tokens


def wordpiece_segment(text: str, table: EmbeddingTable) -> list[str]:
    """Greedy longest-match wordpiece segmentation; unsegmentable tokens
    collapse to the unknown piece."""
    pieces: list[str] = []
    for token in _basic_tokens(text):
        start = 0
        token_pieces: list[str] = []
        while start < len(token):
            end = len(token)
            piece = None
            while start < end:
                candidate = token[start:end]
                if start > 0:
                    candidate = CONTINUATION + candidate
                if table.has(WORDPIECE, candidate):
                    piece = candidate
                    break
                end -= 1
            if piece is None:
                token_pieces = [UNK_TOKEN]
                break
            token_pieces.append(piece)
            start = end
        pieces.extend(token_pieces)
    return pieces


def _require_specials(table: EmbeddingTable) -> None:
    for name in (START_TOKEN, END_TOKEN, UNK_TOKEN):
        if not table.has(WORDPIECE, name):
            raise InjectionError(f"wordpiece table missing special token {name!r}")


def _separator_embedding(table: EmbeddingTable) -> np.ndarray:
    if table.has(WORDPIECE, SEPARATOR_TEXT):
        return table.get(WORDPIECE, SEPARATOR_TEXT)
    return table.get(WORDPIECE, UNK_TOKEN)


def _piece_tokens(text: str, table: EmbeddingTable, span_ref: int | None = None) -> list[Token]:
    return [
        Token(p, KIND_WORDPIECE, table.get(WORDPIECE, p), span_ref)
        for p in wordpiece_segment(text, table)
    ]


def _assemble(atoms: list[list[Token]], table: EmbeddingTable, max_len: int) -> InjectedSequence:
    """Emit atoms left to right under the length budget; an atom is either a
    single wordpiece or a whole injected group, and groups are never split."""
    if max_len < 2:
        raise InjectionError("max_len must fit the start and end specials")
    budget = max_len - 2
    tokens: list[Token] = [Token(START_TOKEN, SPECIAL, table.get(WORDPIECE, START_TOKEN))]
    truncated = False
    used = 0
    for atom in atoms:
        if used + len(atom) > budget:
            truncated = True
            break
        tokens.extend(atom)
        used += len(atom)
    tokens.append(Token(END_TOKEN, SPECIAL, table.get(WORDPIECE, END_TOKEN)))
    return InjectedSequence(tokens=tokens, truncated=truncated, max_len=max_len)


def tokenize_baseline(text: str, wordpiece_table: EmbeddingTable, max_len: int) -> InjectedSequence:
    """Plain wordpiece sequence between start/end specials, no injection."""
    _require_specials(wordpiece_table)
    atoms = [[t] for t in _piece_tokens(text, wordpiece_table)]
    return _assemble(atoms, wordpiece_table, max_len)


def inject(
    text: str,
    spans,
    alignment: AlignmentMap,
    wiki_table: EmbeddingTable,
    wordpiece_table: EmbeddingTable,
    max_len: int,
) -> InjectedSequence:
    """Build the injected sequence for composed text plus resolved spans.

    For each span whose wiki title (preferred) or titlecased surface hits the
    entity table: an ENTITY token carrying the aligned entity vector, the
    slash separator, then the surface's wordpieces, all sharing the span
    index. Unresolvable spans fall back to plain wordpieces; with no spans
    the output is exactly the baseline tokenization.
    """
    _require_specials(wordpiece_table)
    if alignment.source_dim != wiki_table.dim:
        raise InjectionError(
            f"alignment source dim {alignment.source_dim} != entity table dim {wiki_table.dim}"
        )

    order = sorted(range(len(spans)), key=lambda i: spans[i].char_start)
    prev_end = 0
    for i in order:
        span = spans[i]
        if not (0 <= span.char_start < span.char_end <= len(text)):
            raise InjectionError(f"span offsets [{span.char_start},{span.char_end}) out of range")
        if span.char_start < prev_end:
            raise InjectionError("overlapping spans")
        prev_end = span.char_end

    atoms: list[list[Token]] = []
    misses = 0
    pos = 0
    for i in order:
        span = spans[i]
        atoms.extend([t] for t in _piece_tokens(text[pos:span.char_start], wordpiece_table))
        key = None
        if span.wiki_title and wiki_table.has(ENTITY, span.wiki_title):
            key = span.wiki_title
        else:
            candidate = entity_lookup_key(span.surface)
            if wiki_table.has(ENTITY, candidate):
                key = candidate
        if key is None:
            misses += 1
            atoms.extend([t] for t in _piece_tokens(text[span.char_start:span.char_end], wordpiece_table))
        else:
            group = [
                Token(key, KIND_ENTITY, map_entity(alignment, wiki_table.get(ENTITY, key)), i),
                Token(SEPARATOR_TEXT, SEPARATOR, _separator_embedding(wordpiece_table), i),
            ]
            group.extend(_piece_tokens(span.surface, wordpiece_table, span_ref=i))
            atoms.append(group)
        pos = span.char_end
    atoms.extend([t] for t in _piece_tokens(text[pos:], wordpiece_table))

    seq = _assemble(atoms, wordpiece_table, max_len)
    seq.entity_misses = misses
    return seq


def dump_tokens(seq: InjectedSequence) -> list[dict]:
    """Embedding-free token records for golden-file comparison."""
    return [{"text": t.text, "kind": t.kind, "span_ref": t.span_ref} for t in seq.tokens]


def save_debug_dump(sequences: dict[str, InjectedSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record_id, seq in sequences.items():
            row = {"record_id": record_id, "truncated": seq.truncated, "tokens": dump_tokens(seq)}
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")
