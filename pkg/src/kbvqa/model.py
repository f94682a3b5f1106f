"""A small trainable three-encoder bi-modal transformer.

Language self-attention over the injected token sequence, visual
self-attention over precomputed region features, then cross-modality layers
(each modality attends over the other, then per-modality self-attention and
feed-forward), with an answer classifier read off the sequence-start token.
Every attention module can expose its post-softmax probabilities and their
gradients, which is all the explainers need.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .injector import KIND_ENTITY, KIND_WORDPIECE, SEPARATOR, SPECIAL, InjectedSequence

_MASK_FILL = -1e9

# type-embedding ids; ENTITY shares the wordpiece id since aligned entity
# vectors live in the wordpiece space by construction
TYPE_IDS = {SPECIAL: 0, KIND_WORDPIECE: 1, KIND_ENTITY: 1, SEPARATOR: 2}
NUM_TYPES = 3


class ModelError(ValueError):
    """Raised on invalid configuration or shape mismatches."""


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    num_heads: int = 4
    lang_layers: int = 2
    vis_layers: int = 2
    cross_layers: int = 2
    answer_vocab_size: int = 8
    max_text_len: int = 32
    num_regions: int = 8
    region_feat_dim: int = 32
    dropout: float = 0.1
    seed: int = 0
    # content-embedding width fed by the injector; defaults to hidden_dim
    text_embed_dim: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.text_embed_dim is None:
            self.text_embed_dim = self.hidden_dim
        if self.hidden_dim % self.num_heads != 0:
            raise ModelError("hidden_dim must be divisible by num_heads")
        for name in ("hidden_dim", "num_heads", "lang_layers", "vis_layers", "cross_layers",
                     "max_text_len", "num_regions", "region_feat_dim", "text_embed_dim"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.answer_vocab_size < 2:
            raise ModelError("answer_vocab_size must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ModelError("dtype must be float32 or float64")

    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class VisualInput:
    """Precomputed region features plus normalized box coordinates."""

    features: np.ndarray  # (num_regions, region_feat_dim)
    boxes: np.ndarray     # (num_regions, 4), coordinates in [0, 1]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.features.ndim != 2 or self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise ModelError("visual input shapes must be (R, F) features and (R, 4) boxes")
        if self.features.shape[0] != self.boxes.shape[0]:
            raise ModelError("features and boxes disagree on region count")
        if self.boxes.size and (self.boxes.min() < 0 or self.boxes.max() > 1):
            raise ModelError("box coordinates must lie in [0, 1]")


@dataclass
class ForwardTrace:
    """Attention maps captured on a single-example forward.

    ``attn_lang`` holds the language-side self-attention maps in forward
    order: the lang_layers encoder layers followed by each cross layer's
    language self-attention sublayer (lang_layers + cross_layers entries).
    ``attn_vis`` is laid out the same way for the visual side. The cross
    lists hold one (heads x T x I) / (heads x I x T) map per cross layer.
    """

    attn_lang: list[np.ndarray]
    attn_vis: list[np.ndarray]
    attn_cross_tv: list[np.ndarray]
    attn_cross_vt: list[np.ndarray]
    logits: np.ndarray
    pooled_index: int = 0


@dataclass
class TraceGradients:
    """Gradients of one logit w.r.t. every attention map, same layout as the trace."""

    grad_lang: list[np.ndarray]
    grad_vis: list[np.ndarray]
    grad_cross_tv: list[np.ndarray]
    grad_cross_vt: list[np.ndarray]
    target_class: int = 0


class MultiHeadAttention(nn.Module):
    """Standard multi-head attention that can capture or perturb its
    post-softmax probabilities."""

    def __init__(self, hidden_dim: int, num_heads: int, dropout: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.query = nn.Linear(hidden_dim, hidden_dim)
        self.key = nn.Linear(hidden_dim, hidden_dim)
        self.value = nn.Linear(hidden_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, hidden_dim)
        self.dropout = nn.Dropout(dropout)
        self.capture = False
        self.last_probs: torch.Tensor | None = None
        self.hook = None  # callable probs -> probs, for perturbation tests

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, q_in, kv_in, key_mask=None):
        q = self._split(self.query(q_in))
        k = self._split(self.key(kv_in))
        v = self._split(self.value(kv_in))
        scores = q @ k.transpose(-1, -2) / (self.head_dim ** 0.5)
        if key_mask is not None:
            scores = scores + (1.0 - key_mask[:, None, None, :]) * _MASK_FILL
        probs = F.softmax(scores, dim=-1)
        if self.hook is not None:
            probs = self.hook(probs)
        if self.capture:
            if probs.requires_grad:
                probs.retain_grad()
            self.last_probs = probs
        ctx = self.dropout(probs) @ v
        b, _, tq, _ = ctx.shape
        ctx = ctx.transpose(1, 2).reshape(b, tq, self.num_heads * self.head_dim)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, hidden_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(hidden_dim, 4 * hidden_dim)
        self.fc2 = nn.Linear(4 * hidden_dim, hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Post-norm self-attention + feed-forward block."""

    def __init__(self, hidden_dim: int, num_heads: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(hidden_dim, num_heads, dropout)
        self.ffn = FeedForward(hidden_dim, dropout)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, key_mask=None):
        x = self.norm1(x + self.dropout(self.attn(x, x, key_mask)))
        return self.norm2(x + self.dropout(self.ffn(x)))


class CrossLayer(nn.Module):
    """Cross-attention in both directions, then per-modality self-attention
    and feed-forward. Both cross-attentions read the layer's inputs."""

    def __init__(self, hidden_dim: int, num_heads: int, dropout: float):
        super().__init__()
        self.cross_tv = MultiHeadAttention(hidden_dim, num_heads, dropout)
        self.cross_vt = MultiHeadAttention(hidden_dim, num_heads, dropout)
        self.self_lang = MultiHeadAttention(hidden_dim, num_heads, dropout)
        self.self_vis = MultiHeadAttention(hidden_dim, num_heads, dropout)
        self.ffn_lang = FeedForward(hidden_dim, dropout)
        self.ffn_vis = FeedForward(hidden_dim, dropout)
        self.norms = nn.ModuleList([nn.LayerNorm(hidden_dim) for _ in range(6)])
        self.dropout = nn.Dropout(dropout)

    def forward(self, lang, vis, text_mask=None):
        lang_x = self.norms[0](lang + self.dropout(self.cross_tv(lang, vis)))
        vis_x = self.norms[1](vis + self.dropout(self.cross_vt(vis, lang, text_mask)))
        lang_s = self.norms[2](lang_x + self.dropout(self.self_lang(lang_x, lang_x, text_mask)))
        vis_s = self.norms[3](vis_x + self.dropout(self.self_vis(vis_x, vis_x)))
        lang_out = self.norms[4](lang_s + self.dropout(self.ffn_lang(lang_s)))
        vis_out = self.norms[5](vis_s + self.dropout(self.ffn_vis(vis_s)))
        return lang_out, vis_out


class BimodalModel(nn.Module):
    def __init__(self, config: ModelConfig, answer_vocab: list[str] | None = None):
        super().__init__()
        if answer_vocab is not None and len(answer_vocab) != config.answer_vocab_size:
            raise ModelError("answer vocabulary length must equal answer_vocab_size")
        self.config = config
        self.answer_vocab = list(answer_vocab) if answer_vocab is not None else None
        h, d = config.hidden_dim, config.dropout

        self.text_proj = nn.Linear(config.text_embed_dim, h)
        self.pos_emb = nn.Embedding(config.max_text_len, h)
        self.type_emb = nn.Embedding(NUM_TYPES, h)
        self.text_norm = nn.LayerNorm(h)
        self.feat_proj = nn.Linear(config.region_feat_dim, h)
        self.box_proj = nn.Linear(4, h)
        self.vis_norm = nn.LayerNorm(h)
        self.emb_dropout = nn.Dropout(d)

        self.lang_layers = nn.ModuleList(
            EncoderLayer(h, config.num_heads, d) for _ in range(config.lang_layers)
        )
        self.vis_layers = nn.ModuleList(
            EncoderLayer(h, config.num_heads, d) for _ in range(config.vis_layers)
        )
        self.cross_layers = nn.ModuleList(
            CrossLayer(h, config.num_heads, d) for _ in range(config.cross_layers)
        )
        self.pooler = nn.Linear(h, h)
        self.classifier = nn.Linear(h, config.answer_vocab_size)

    # --- attention plumbing -------------------------------------------------

    def attention_sites(self) -> dict[str, MultiHeadAttention]:
        sites: dict[str, MultiHeadAttention] = {}
        for i, layer in enumerate(self.lang_layers):
            sites[f"lang_{i}"] = layer.attn
        for i, layer in enumerate(self.vis_layers):
            sites[f"vis_{i}"] = layer.attn
        for k, layer in enumerate(self.cross_layers):
            sites[f"x_tv_{k}"] = layer.cross_tv
            sites[f"x_vt_{k}"] = layer.cross_vt
            sites[f"x_lang_self_{k}"] = layer.self_lang
            sites[f"x_vis_self_{k}"] = layer.self_vis
        return sites

    def set_capture(self, on: bool) -> None:
        for module in self.attention_sites().values():
            module.capture = on
            module.last_probs = None

    def set_attention_hook(self, site: str, fn) -> None:
        self.attention_sites()[site].hook = fn

    def clear_attention_hooks(self) -> None:
        for module in self.attention_sites().values():
            module.hook = None

    # --- forward ------------------------------------------------------------

    def embed_text(self, text_emb, type_ids):
        t = text_emb.shape[1]
        if t > self.config.max_text_len:
            raise ModelError(f"sequence length {t} exceeds max_text_len {self.config.max_text_len}")
        positions = torch.arange(t, device=text_emb.device)
        x = self.text_proj(text_emb) + self.pos_emb(positions)[None] + self.type_emb(type_ids)
        return self.emb_dropout(self.text_norm(x))

    def embed_visual(self, feats, boxes):
        if feats.shape[1] != self.config.num_regions or feats.shape[2] != self.config.region_feat_dim:
            raise ModelError("visual features do not match configured shape")
        x = self.feat_proj(feats) + self.box_proj(boxes)
        return self.emb_dropout(self.vis_norm(x))

    def forward(self, text_emb, type_ids, feats, boxes, text_mask=None):
        """Batched core forward; returns logits (B, answer_vocab_size)."""
        lang = self.embed_text(text_emb, type_ids)
        vis = self.embed_visual(feats, boxes)
        for layer in self.lang_layers:
            lang = layer(lang, text_mask)
        for layer in self.vis_layers:
            vis = layer(vis)
        for layer in self.cross_layers:
            lang, vis = layer(lang, vis, text_mask)
        pooled = torch.tanh(self.pooler(lang[:, 0]))
        return self.classifier(pooled)


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------

def init_model(config: ModelConfig, answer_vocab: list[str] | None = None) -> BimodalModel:
    """Build a model with deterministic, seed-keyed initialization."""
    torch.manual_seed(config.seed)
    model = BimodalModel(config, answer_vocab)
    model.to(config.torch_dtype())
    model.eval()
    return model


def sequence_tensors(model: BimodalModel, seq: InjectedSequence):
    dtype = model.config.torch_dtype()
    emb = torch.as_tensor(seq.embedding_matrix(), dtype=dtype)[None]
    if emb.shape[-1] != model.config.text_embed_dim:
        raise ModelError(
            f"token embedding dim {emb.shape[-1]} != configured {model.config.text_embed_dim}"
        )
    type_ids = torch.tensor([[TYPE_IDS[t.kind] for t in seq.tokens]], dtype=torch.long)
    return emb, type_ids


def visual_tensors(model: BimodalModel, vis: VisualInput):
    dtype = model.config.torch_dtype()
    feats = torch.as_tensor(vis.features, dtype=dtype)[None]
    boxes = torch.as_tensor(vis.boxes, dtype=dtype)[None]
    return feats, boxes


def _collect_trace(model: BimodalModel, logits: torch.Tensor) -> ForwardTrace:
    sites = model.attention_sites()
    cfg = model.config

    def probs(name):
        return sites[name].last_probs.detach()[0].cpu().numpy()

    attn_lang = [probs(f"lang_{i}") for i in range(cfg.lang_layers)]
    attn_lang += [probs(f"x_lang_self_{k}") for k in range(cfg.cross_layers)]
    attn_vis = [probs(f"vis_{i}") for i in range(cfg.vis_layers)]
    attn_vis += [probs(f"x_vis_self_{k}") for k in range(cfg.cross_layers)]
    return ForwardTrace(
        attn_lang=attn_lang,
        attn_vis=attn_vis,
        attn_cross_tv=[probs(f"x_tv_{k}") for k in range(cfg.cross_layers)],
        attn_cross_vt=[probs(f"x_vt_{k}") for k in range(cfg.cross_layers)],
        logits=logits.detach()[0].cpu().numpy(),
        pooled_index=0,
    )


def forward(model: BimodalModel, seq: InjectedSequence, vis: VisualInput, record_trace: bool = False):
    """Deterministic single-example eval forward; optionally captures attention."""
    model.eval()
    emb, type_ids = sequence_tensors(model, seq)
    feats, boxes = visual_tensors(model, vis)
    if record_trace:
        model.set_capture(True)
    try:
        with torch.no_grad():
            logits = model(emb, type_ids, feats, boxes)
        trace = _collect_trace(model, logits) if record_trace else None
    finally:
        model.set_capture(False)
    return logits[0].cpu().numpy(), trace


def attention_gradients(model: BimodalModel, seq: InjectedSequence, vis: VisualInput,
                        target_class: int):
    """Gradient of the chosen logit w.r.t. every post-softmax attention map.

    Returns (trace, gradients) with matching shapes; attention maps the logit
    does not depend on get exact zero gradients.
    """
    if not 0 <= target_class < model.config.answer_vocab_size:
        raise ModelError(f"target class {target_class} out of range")
    model.eval()
    emb, type_ids = sequence_tensors(model, seq)
    feats, boxes = visual_tensors(model, vis)
    model.set_capture(True)
    try:
        with torch.enable_grad():
            logits = model(emb, type_ids, feats, boxes)
            model.zero_grad(set_to_none=True)
            logits[0, target_class].backward()
        trace = _collect_trace(model, logits)
        sites = model.attention_sites()
        cfg = model.config

        def grad(name):
            p = sites[name].last_probs
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            return g.detach()[0].cpu().numpy()

        grad_lang = [grad(f"lang_{i}") for i in range(cfg.lang_layers)]
        grad_lang += [grad(f"x_lang_self_{k}") for k in range(cfg.cross_layers)]
        grad_vis = [grad(f"vis_{i}") for i in range(cfg.vis_layers)]
        grad_vis += [grad(f"x_vis_self_{k}") for k in range(cfg.cross_layers)]
        grads = TraceGradients(
            grad_lang=grad_lang,
            grad_vis=grad_vis,
            grad_cross_tv=[grad(f"x_tv_{k}") for k in range(cfg.cross_layers)],
            grad_cross_vt=[grad(f"x_vt_{k}") for k in range(cfg.cross_layers)],
            target_class=target_class,
        )
    finally:
        model.set_capture(False)
        model.zero_grad(set_to_none=True)
    return trace, grads


def predict_topk(logits: np.ndarray, k: int, answer_vocab: list[str]) -> list[tuple[str, float]]:
    """Top-k answers by logit, descending; ties broken by vocabulary index."""
    if k < 1:
        raise ModelError("k must be >= 1")
    logits = np.asarray(logits)
    k = min(k, len(logits))
    order = sorted(range(len(logits)), key=lambda i: (-float(logits[i]), i))
    return [(answer_vocab[i], float(logits[i])) for i in order[:k]]


def parameter_checksum(model: BimodalModel) -> str:
    digest = hashlib.sha256()
    for name, param in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingExample:
    """One prepared example: injected sequence, visual input, and targets.

    ``eval_scores[i]`` is the answer score earned if vocabulary entry ``i``
    is predicted (1/0 for exact matching, consensus scores for soft sets).
    Examples without an in-vocabulary answer carry ``target_index=None`` and
    are skipped by the trainer.
    """

    record_id: str
    seq: InjectedSequence
    vis: VisualInput
    target_index: int | None
    target_dist: np.ndarray | None
    eval_scores: np.ndarray


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    soft_labels: bool = False
    seed: int = 0
    checkpoint_path: str | None = None


def _collate(model: BimodalModel, examples: list[TrainingExample]):
    dtype = model.config.torch_dtype()
    t_max = max(len(ex.seq) for ex in examples)
    e_dim = model.config.text_embed_dim
    b = len(examples)
    emb = torch.zeros(b, t_max, e_dim, dtype=dtype)
    type_ids = torch.zeros(b, t_max, dtype=torch.long)
    mask = torch.zeros(b, t_max, dtype=dtype)
    feats = torch.stack([torch.as_tensor(ex.vis.features, dtype=dtype) for ex in examples])
    boxes = torch.stack([torch.as_tensor(ex.vis.boxes, dtype=dtype) for ex in examples])
    for i, ex in enumerate(examples):
        t = len(ex.seq)
        emb[i, :t] = torch.as_tensor(ex.seq.embedding_matrix(), dtype=dtype)
        type_ids[i, :t] = torch.tensor([TYPE_IDS[tok.kind] for tok in ex.seq.tokens])
        mask[i, :t] = 1.0
    return emb, type_ids, mask, feats, boxes


def training_loss(model: BimodalModel, examples: list[TrainingExample],
                  soft_labels: bool = False) -> torch.Tensor:
    """Cross-entropy against the gold answer, or against the normalized
    answer-weight distribution when soft labels are on."""
    emb, type_ids, mask, feats, boxes = _collate(model, examples)
    logits = model(emb, type_ids, feats, boxes, text_mask=mask)
    if soft_labels:
        dists = torch.stack([
            torch.as_tensor(ex.target_dist, dtype=logits.dtype) for ex in examples
        ])
        return -(dists * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()
    targets = torch.tensor([ex.target_index for ex in examples], dtype=torch.long)
    return F.cross_entropy(logits, targets)


def predict_batch(model: BimodalModel, examples: list[TrainingExample],
                  batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for a list of examples, batched; (N, vocab)."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            emb, type_ids, mask, feats, boxes = _collate(model, chunk)
            out.append(model(emb, type_ids, feats, boxes, text_mask=mask).cpu().numpy())
    return np.concatenate(out, axis=0)


def accuracy_on(model: BimodalModel, examples: list[TrainingExample]) -> float:
    logits = predict_batch(model, examples)
    preds = logits.argmax(axis=1)
    return float(np.mean([ex.eval_scores[p] for ex, p in zip(examples, preds)]))


def finetune(model: BimodalModel, train_examples: list[TrainingExample],
             train_config: TrainConfig,
             eval_examples: list[TrainingExample] | None = None) -> dict:
    """Fine-tune on prepared examples; per-epoch loss and eval accuracy.

    Targets come from the single gold answer (or the normalized answer-weight
    distribution under soft labels). Fully seeded: identical inputs and seeds
    reproduce identical metrics.
    """
    trainable = [ex for ex in train_examples
                 if (ex.target_dist is not None if train_config.soft_labels
                     else ex.target_index is not None)]
    if not trainable:
        raise ModelError("no trainable examples (answer vocabulary may be empty)")
    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    history = []
    for epoch in range(train_config.epochs):
        model.train()
        order = rng.permutation(len(trainable))
        total, count = 0.0, 0
        for start in range(0, len(order), train_config.batch_size):
            batch = [trainable[i] for i in order[start:start + train_config.batch_size]]
            loss = training_loss(model, batch, soft_labels=train_config.soft_labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        entry = {"epoch": epoch, "train_loss": total / count}
        if eval_examples:
            entry["eval_accuracy"] = accuracy_on(model, eval_examples)
        history.append(entry)
    model.eval()
    metrics = {
        "epochs": history,
        "final_train_accuracy": accuracy_on(model, trainable),
    }
    if eval_examples:
        metrics["final_eval_accuracy"] = accuracy_on(model, eval_examples)
    if train_config.checkpoint_path:
        save_checkpoint(model, train_config.checkpoint_path)
    return metrics


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_checkpoint(model: BimodalModel, path) -> None:
    """Single-file archive: parameter tensors + config + answer vocabulary."""
    torch.save(
        {
            "config": asdict(model.config),
            "answer_vocab": model.answer_vocab,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> BimodalModel:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = ModelConfig(**payload["config"])
    model = BimodalModel(config, payload["answer_vocab"])
    model.load_state_dict(payload["state_dict"])
    model.to(config.torch_dtype())
    model.eval()
    return model


class RegionFeatureStore:
    """Region features on disk: a JSON index mapping image_ref to a row
    offset and region count, over a flat little-endian float32 binary of
    concatenated (features || boxes) rows."""

    def __init__(self, feat_dim: int, entries: dict[str, dict], data: np.ndarray):
        self.feat_dim = feat_dim
        self.entries = entries
        self._data = data  # (total_rows, feat_dim + 4)

    @staticmethod
    def write(features_by_ref: dict[str, tuple[np.ndarray, np.ndarray]],
              index_path, data_path) -> None:
        entries = {}
        rows = []
        offset = 0
        feat_dim = None
        for ref, (feats, boxes) in features_by_ref.items():
            feats = np.asarray(feats, dtype=np.float32)
            boxes = np.asarray(boxes, dtype=np.float32)
            if feat_dim is None:
                feat_dim = feats.shape[1]
            elif feats.shape[1] != feat_dim:
                raise ModelError("inconsistent feature dims in region store")
            entries[ref] = {"offset": offset, "num_regions": int(feats.shape[0])}
            rows.append(np.concatenate([feats, boxes], axis=1))
            offset += feats.shape[0]
        data = np.concatenate(rows, axis=0).astype("<f4")
        with open(data_path, "wb") as fh:
            fh.write(data.tobytes())
        with open(index_path, "w", encoding="utf-8") as fh:
            json.dump({"feat_dim": feat_dim, "entries": entries}, fh, sort_keys=True)

    @classmethod
    def open(cls, index_path, data_path) -> "RegionFeatureStore":
        with open(index_path, encoding="utf-8") as fh:
            index = json.load(fh)
        feat_dim = index["feat_dim"]
        raw = np.fromfile(data_path, dtype="<f4")
        data = raw.reshape(-1, feat_dim + 4)
        return cls(feat_dim, index["entries"], data)

    def get(self, image_ref: str) -> VisualInput:
        entry = self.entries[image_ref]
        rows = self._data[entry["offset"]:entry["offset"] + entry["num_regions"]]
        return VisualInput(features=rows[:, :self.feat_dim], boxes=rows[:, self.feat_dim:])
