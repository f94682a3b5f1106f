"""Gradient-weighted attention relevancy for the bi-modal model.

Two explainers over a captured forward trace: the bi-modal generic-attention
method, which accumulates relevancy through self- and co-attention layers for
all four modality pairs, and the self-attention rollout variant restricted to
the language side. Both consume head-averaged, gradient-weighted,
negative-clipped attention; token rankings, region saliency, and perturbation
tests build on top.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .embeddings import WORDPIECE, EmbeddingTable
from .injector import KIND_ENTITY, KIND_WORDPIECE, UNK_TOKEN, InjectedSequence
from .model import (
    BimodalModel,
    ForwardTrace,
    TraceGradients,
    TrainingExample,
    attention_gradients,
    forward,
)

BMGAE = "BMGAE"
TRF = "TRF"
RANDOM = "RANDOM"
EXPLAINERS = (BMGAE, TRF, RANDOM)

RANKABLE_KINDS = (KIND_WORDPIECE, KIND_ENTITY)


class ExplainError(ValueError):
    """Raised on malformed traces or gradients."""


@dataclass
class RelevancyMaps:
    """Nonnegative relevance for each modality pair (text x, image x)."""

    R_tt: np.ndarray
    R_ti: np.ndarray
    R_it: np.ndarray
    R_ii: np.ndarray


@dataclass
class RankedToken:
    index: int
    text: str
    kind: str
    score: float


def _head_mean_clipped(attn: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """The per-layer update matrix: mean over heads of relu(grad * attn)."""
    a = np.asarray(attn, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if a.shape != g.shape:
        raise ExplainError(f"attention {a.shape} and gradient {g.shape} shapes differ")
    if not np.isfinite(g).all():
        raise ExplainError("non-finite gradients")
    return np.maximum(g * a, 0.0).mean(axis=0)


def _row_normalized(R: np.ndarray) -> np.ndarray:
    """Row-normalize accumulated relevance away from the identity part;
    zero rows (nothing accumulated yet) stay zero."""
    eye = np.eye(R.shape[0])
    hat = R - eye
    sums = hat.sum(axis=-1, keepdims=True)
    out = np.divide(hat, sums, out=np.zeros_like(hat), where=sums != 0)
    return out + eye


def _layer_counts(trace: ForwardTrace, grads: TraceGradients):
    x = len(trace.attn_cross_tv)
    lang_only = len(trace.attn_lang) - x
    vis_only = len(trace.attn_vis) - x
    if lang_only < 0 or vis_only < 0:
        raise ExplainError("trace layer lists shorter than cross-layer count")
    for name in ("attn_lang", "attn_vis", "attn_cross_tv", "attn_cross_vt"):
        if len(getattr(trace, name)) != len(getattr(grads, name.replace("attn", "grad"))):
            raise ExplainError(f"{name}: trace and gradients disagree on layer count")
    return lang_only, vis_only, x


def explain_bmgae(trace: ForwardTrace, grads: TraceGradients) -> RelevancyMaps:
    """Accumulate bi-modal relevancy maps through every attention layer.

    Same-modality maps start at identity, cross maps at zero. Self-attention
    layers left-multiply the update matrix onto the same-modality and cross
    maps; each co-attention layer couples the modalities through the
    row-normalized accumulated maps, both directions computed from the state
    at layer entry.
    """
    lang_only, vis_only, num_cross = _layer_counts(trace, grads)
    t_len = trace.attn_lang[0].shape[-1] if trace.attn_lang else trace.attn_cross_tv[0].shape[-2]
    if trace.attn_vis:
        i_len = trace.attn_vis[0].shape[-1]
    elif trace.attn_cross_tv:
        i_len = trace.attn_cross_tv[0].shape[-1]
    else:
        i_len = 0

    R_tt = np.eye(t_len)
    R_ii = np.eye(i_len)
    R_ti = np.zeros((t_len, i_len))
    R_it = np.zeros((i_len, t_len))

    for i in range(lang_only):
        A = _head_mean_clipped(trace.attn_lang[i], grads.grad_lang[i])
        R_tt = R_tt + A @ R_tt
        R_ti = R_ti + A @ R_ti
    for i in range(vis_only):
        A = _head_mean_clipped(trace.attn_vis[i], grads.grad_vis[i])
        R_ii = R_ii + A @ R_ii
        R_it = R_it + A @ R_it

    for k in range(num_cross):
        A_tv = _head_mean_clipped(trace.attn_cross_tv[k], grads.grad_cross_tv[k])
        A_vt = _head_mean_clipped(trace.attn_cross_vt[k], grads.grad_cross_vt[k])
        Rtt_n = _row_normalized(R_tt)
        Rii_n = _row_normalized(R_ii)
        d_ti = Rtt_n.T @ A_tv @ Rii_n
        d_tt = A_tv @ R_it
        d_it = Rii_n.T @ A_vt @ Rtt_n
        d_ii = A_vt @ R_ti
        R_ti = R_ti + d_ti
        R_tt = R_tt + d_tt
        R_it = R_it + d_it
        R_ii = R_ii + d_ii

        A = _head_mean_clipped(trace.attn_lang[lang_only + k], grads.grad_lang[lang_only + k])
        R_tt = R_tt + A @ R_tt
        R_ti = R_ti + A @ R_ti
        A = _head_mean_clipped(trace.attn_vis[vis_only + k], grads.grad_vis[vis_only + k])
        R_ii = R_ii + A @ R_ii
        R_it = R_it + A @ R_it

    return RelevancyMaps(R_tt=R_tt, R_ti=R_ti, R_it=R_it, R_ii=R_ii)


def explain_trf(trace: ForwardTrace, grads: TraceGradients) -> np.ndarray:
    """Identity-initialized rollout over the language-side self-attention
    layers: per layer, row-normalize (I + update) and left-multiply."""
    if not trace.attn_lang:
        raise ExplainError("trace has no language self-attention layers")
    t_len = trace.attn_lang[0].shape[-1]
    R = np.eye(t_len)
    for attn, grad in zip(trace.attn_lang, grads.grad_lang):
        A = _head_mean_clipped(attn, grad)
        M = np.eye(t_len) + A
        M = M / M.sum(axis=-1, keepdims=True)
        R = M @ R
    return R


def text_relevancy(maps_or_matrix) -> np.ndarray:
    if isinstance(maps_or_matrix, RelevancyMaps):
        return maps_or_matrix.R_tt
    return np.asarray(maps_or_matrix)


def top_tokens(maps_or_matrix, seq: InjectedSequence, k: int,
               pooled_index: int = 0) -> list[RankedToken]:
    """Rank content tokens by the classification-position relevancy row.

    Specials and the slash separator are plumbing and never ranked; ties
    break by token index.
    """
    if k < 1:
        raise ExplainError("k must be >= 1")
    matrix = text_relevancy(maps_or_matrix)
    if matrix.shape[0] != len(seq):
        raise ExplainError(f"relevancy size {matrix.shape[0]} != sequence length {len(seq)}")
    row = matrix[pooled_index]
    candidates = [
        RankedToken(i, tok.text, tok.kind, float(row[i]))
        for i, tok in enumerate(seq.tokens)
        if tok.kind in RANKABLE_KINDS
    ]
    candidates.sort(key=lambda r: (-r.score, r.index))
    return candidates[:k]


def entity_in_topk(ranking: list[RankedToken], seq: InjectedSequence, k: int) -> bool:
    return any(r.kind == KIND_ENTITY for r in ranking[:k])


def region_saliency(maps: RelevancyMaps, k: int,
                    pooled_index: int = 0) -> list[tuple[int, float]]:
    """Regions ranked by the classification-position row of the text-image map."""
    row = maps.R_ti[pooled_index]
    order = sorted(range(len(row)), key=lambda i: (-float(row[i]), i))
    return [(i, float(row[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# Rankings on live models, and perturbation testing
# ---------------------------------------------------------------------------

def explain_example(model: BimodalModel, seq: InjectedSequence, vis, method: str,
                    target_class: int | None = None):
    """Relevancy-based ranking of every rankable token for one example.

    The explanation target defaults to the model's own prediction. Returns
    (ranking over all rankable tokens, relevancy maps or None for TRF).
    """
    if target_class is None:
        logits, _ = forward(model, seq, vis)
        target_class = int(np.argmax(logits))
    trace, grads = attention_gradients(model, seq, vis, target_class)
    if method == BMGAE:
        maps = explain_bmgae(trace, grads)
        return top_tokens(maps, seq, len(seq), trace.pooled_index), maps
    if method == TRF:
        matrix = explain_trf(trace, grads)
        return top_tokens(matrix, seq, len(seq), trace.pooled_index), None
    raise ExplainError(f"unknown explanation method {method!r}")


def _random_ranking(seq: InjectedSequence, rng: np.random.Generator) -> list[RankedToken]:
    idx = [i for i, tok in enumerate(seq.tokens) if tok.kind in RANKABLE_KINDS]
    rng.shuffle(idx)
    return [RankedToken(i, seq.tokens[i].text, seq.tokens[i].kind, 0.0) for i in idx]


def mask_tokens(seq: InjectedSequence, indices, unk_embedding: np.ndarray) -> InjectedSequence:
    """Replace the chosen tokens' embeddings with the unknown-piece embedding,
    keeping positions and kinds intact."""
    chosen = set(indices)
    tokens = [
        dc_replace(tok, embedding=unk_embedding) if i in chosen else tok
        for i, tok in enumerate(seq.tokens)
    ]
    return InjectedSequence(tokens=tokens, truncated=seq.truncated, max_len=seq.max_len,
                            entity_misses=seq.entity_misses)


def perturbation_test(
    model: BimodalModel,
    examples: list[TrainingExample],
    method: str,
    fractions: list[float],
    wordpiece_table: EmbeddingTable,
    seed: int = 0,
) -> dict[float, float]:
    """Mask the top-ranked fraction of content tokens and re-run inference.

    For each fraction f the top ceil(f * T) tokens of the method's ranking
    (T = rankable tokens) are replaced by the unknown-piece embedding;
    RANDOM uses a seeded uniform ranking as control. Returns accuracy per
    fraction.
    """
    if method not in EXPLAINERS:
        raise ExplainError(f"unknown perturbation method {method!r}")
    if not examples:
        raise ExplainError("empty evaluation set")
    unk = wordpiece_table.get(WORDPIECE, UNK_TOKEN)
    rng = np.random.default_rng(seed)

    rankings = []
    for ex in examples:
        if method == RANDOM:
            rankings.append(_random_ranking(ex.seq, rng))
        else:
            ranking, _ = explain_example(model, ex.seq, ex.vis, method)
            rankings.append(ranking)

    accuracies: dict[float, float] = {}
    for f in fractions:
        scores = []
        for ex, ranking in zip(examples, rankings):
            n_mask = math.ceil(f * len(ranking))
            masked = mask_tokens(ex.seq, [r.index for r in ranking[:n_mask]], unk)
            logits, _ = forward(model, masked, ex.vis)
            scores.append(float(ex.eval_scores[int(np.argmax(logits))]))
        accuracies[f] = float(np.mean(scores))
    return accuracies


# ---------------------------------------------------------------------------
# Explanation dumps
# ---------------------------------------------------------------------------

def explanation_record(record_id: str, method: str, ranking: list[RankedToken],
                       seq: InjectedSequence, region_scores=None, k: int = 5) -> dict:
    return {
        "record_id": record_id,
        "method": method,
        "top_tokens": [
            {"text": r.text, "kind": r.kind, "score": r.score} for r in ranking[:k]
        ],
        "region_scores": [[int(i), float(s)] for i, s in (region_scores or [])],
        "entity_in_top5": entity_in_topk(ranking, seq, 5),
    }


def save_explanations(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in records:
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")
