"""Seeded synthetic benchmark where knowledge injection is the only way to win.

Entity-keyed questions all tokenize identically (the entity alias is out of
vocabulary, so the language encoder sees the unknown piece) and their visual
features are label-independent noise: without injection the best possible
accuracy is chance. The injected entity vector is answer-class-separable, so
injection lifts accuracy to near-perfect. A control fraction of questions is
answerable from text alone.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .embeddings import ENTITY, WORD, WORDPIECE, EmbeddingTable
from .injector import END_TOKEN, SEPARATOR_TEXT, START_TOKEN, UNK_TOKEN, entity_lookup_key
from .spans import Answer, MetaEntity, QuestionRecord

CODEWORDS = [
    "amber", "beryl", "coral", "dune", "ember", "fjord", "grove", "heath",
    "iris", "jade", "krill", "lagoon", "maple", "nectar", "onyx", "pearl",
]

ENTITY_QUESTION = "who is in the picture of {alias}?"
CONTROL_QUESTION = "the secret word is {word}."
TEMPLATE_WORDS = ["who", "is", "in", "the", "picture", "of", "secret", "word",
                  "a", "portrait", "photo"]

ENTITY_TYPE_TAG = "1-hop"
CONTROL_TYPE_TAG = "text-ctl"


@dataclass
class SynthConfig:
    num_entities: int = 48
    num_train: int = 1000
    num_holdout: int = 200
    num_test: int = 200
    num_answer_classes: int = 8
    wiki_dim: int = 16
    wordpiece_dim: int = 32
    num_regions: int = 8
    region_feat_dim: int = 32
    control_fraction: float = 0.25
    entity_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_answer_classes > len(CODEWORDS):
            raise ValueError(f"at most {len(CODEWORDS)} answer classes supported")
        if not 0.0 <= self.control_fraction < 1.0:
            raise ValueError("control_fraction must be in [0, 1)")
        for name in ("num_entities", "num_train", "num_test", "wiki_dim",
                     "wordpiece_dim", "num_regions", "region_feat_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class SyntheticBenchmark:
    config: SynthConfig
    records: list[QuestionRecord]
    wiki_table: EmbeddingTable
    wordpiece_table: EmbeddingTable
    region_features: dict[str, tuple[np.ndarray, np.ndarray]]
    answer_classes: list[str]
    entity_class: dict[str, int] = field(default_factory=dict)  # wiki key -> class
    true_map: np.ndarray | None = None  # planted wordpiece_dim x wiki_dim map


def _entity_aliases(n: int) -> list[str]:
    """OOV aliases: 'zq' + letters drawn from {x,y,z}. No vocabulary word or
    wordpiece starts with 'z', so these always tokenize to the unknown piece."""
    combos = itertools.product("xyz", repeat=4)
    aliases = ["zq" + "".join(c) for c in combos]
    if n > len(aliases):
        raise ValueError(f"at most {len(aliases)} entities supported")
    return aliases[:n]


def _shared_words(n: int) -> list[str]:
    letters = "abcdefghijklm"
    words = ["w" + a + b for a, b in itertools.product(letters, repeat=2)]
    if n > len(words):
        raise ValueError("shared vocabulary request too large")
    return words[:n]


def generate_synthetic_dataset(config: SynthConfig) -> SyntheticBenchmark:
    """Build the full benchmark: records, both embedding tables, and region
    features, all derived from one seed."""
    rng = np.random.default_rng(config.seed)
    classes = CODEWORDS[: config.num_answer_classes]
    aliases = _entity_aliases(config.num_entities)

    # planted linear relation between the two embedding spaces
    true_map = rng.normal(size=(config.wordpiece_dim, config.wiki_dim)) / np.sqrt(config.wiki_dim)
    shared = _shared_words(4 * config.wiki_dim)
    shared_vecs = rng.normal(size=(len(shared), config.wiki_dim))

    wiki = EmbeddingTable(dim=config.wiki_dim, cased=True)
    for word, vec in zip(shared, shared_vecs):
        wiki.add(WORD, word, vec)
    centers = rng.normal(size=(config.num_answer_classes, config.wiki_dim))
    entity_class: dict[str, int] = {}
    for i, alias in enumerate(aliases):
        cls = i % config.num_answer_classes
        key = entity_lookup_key(alias)
        vec = centers[cls] + config.entity_noise * rng.normal(size=config.wiki_dim)
        wiki.add(ENTITY, key, vec)
        entity_class[key] = cls

    wp = EmbeddingTable(dim=config.wordpiece_dim, cased=False)
    for word, vec in zip(shared, shared_vecs):
        wp.add(WORDPIECE, word, true_map @ vec)
    base_tokens = [START_TOKEN, END_TOKEN, UNK_TOKEN, SEPARATOR_TEXT, "?", "."]
    for token in base_tokens + TEMPLATE_WORDS + classes:
        wp.add(WORDPIECE, token, rng.normal(size=config.wordpiece_dim))

    entities_of_class = {
        c: [k for k, v in entity_class.items() if v == c]
        for c in range(config.num_answer_classes)
    }
    alias_of_key = {entity_lookup_key(a): a for a in aliases}

    records: list[QuestionRecord] = []
    region_features: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    split_plan = (
        [("train", config.num_train), ("holdout", config.num_holdout), ("test", config.num_test)]
    )
    index = 0
    entity_q_count = 0
    for split, count in split_plan:
        n_control = round(config.control_fraction * count)
        flags = np.array([True] * n_control + [False] * (count - n_control))
        rng.shuffle(flags)
        for is_control in flags:
            rid = f"q{index:05d}"
            image_ref = f"img{index:05d}"
            if is_control:
                cls = int(rng.integers(config.num_answer_classes))
                record = QuestionRecord(
                    id=rid,
                    question=CONTROL_QUESTION.format(word=classes[cls]),
                    image_ref=image_ref,
                    caption="a portrait photo." if index % 2 == 0 else None,
                    answers=[Answer(text=classes[cls], weight=1.0)],
                    question_types=[CONTROL_TYPE_TAG],
                    split=split,
                )
            else:
                # cycle classes so the label marginal is uniform by construction
                cls = entity_q_count % config.num_answer_classes
                entity_q_count += 1
                key = entities_of_class[cls][int(rng.integers(len(entities_of_class[cls])))]
                alias = alias_of_key[key]
                record = QuestionRecord(
                    id=rid,
                    question=ENTITY_QUESTION.format(alias=alias),
                    image_ref=image_ref,
                    caption="a portrait photo." if index % 2 == 0 else None,
                    answers=[Answer(text=classes[cls], weight=1.0)],
                    question_types=[ENTITY_TYPE_TAG],
                    meta_entities=[MetaEntity(name=alias, wiki_title=key)],
                    split=split,
                )
            records.append(record)
            # label-independent visual noise: regions never leak the class
            feats = rng.normal(size=(config.num_regions, config.region_feat_dim))
            boxes = rng.uniform(size=(config.num_regions, 4))
            region_features[image_ref] = (feats, boxes)
            index += 1

    return SyntheticBenchmark(
        config=config,
        records=records,
        wiki_table=wiki,
        wordpiece_table=wp,
        region_features=region_features,
        answer_classes=classes,
        entity_class=entity_class,
        true_map=true_map,
    )
