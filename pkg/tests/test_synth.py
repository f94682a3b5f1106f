import hashlib
import io

import numpy as np
import pytest

from kbvqa.embeddings import ENTITY, learn_alignment, shared_vocabulary
from kbvqa.injector import UNK_TOKEN, tokenize_baseline
from kbvqa.synth import CONTROL_TYPE_TAG, ENTITY_TYPE_TAG, SynthConfig, generate_synthetic_dataset


def small_config(**overrides):
    base = dict(num_entities=12, num_train=60, num_holdout=20, num_test=20,
                num_answer_classes=4, wiki_dim=6, wordpiece_dim=10,
                num_regions=3, region_feat_dim=5, seed=3)
    base.update(overrides)
    return SynthConfig(**base)


def dataset_checksum(bench):
    from kbvqa.harness import save_dataset

    buf = io.StringIO()

    class _W:
        def write(self, s):
            buf.write(s)

    import tempfile, os
    with tempfile.NamedTemporaryFile("w+", suffix=".jsonl", delete=False) as fh:
        path = fh.name
    save_dataset(bench.records, path)
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    os.unlink(path)
    return digest


def test_generation_is_deterministic():
    a = generate_synthetic_dataset(small_config())
    b = generate_synthetic_dataset(small_config())
    assert dataset_checksum(a) == dataset_checksum(b)
    for key in a.wiki_table.entries:
        np.testing.assert_array_equal(a.wiki_table.entries[key], b.wiki_table.entries[key])
    c = generate_synthetic_dataset(small_config(seed=4))
    assert dataset_checksum(a) != dataset_checksum(c)


def test_control_subset_text_rule_is_functional():
    bench = generate_synthetic_dataset(small_config())
    # the trivial classifier: majority answer per control keyword; it must be
    # exact because each keyword maps to exactly one answer
    rule = {}
    for r in bench.records:
        if r.question_types == [CONTROL_TYPE_TAG]:
            word = next(w for w in bench.answer_classes if w in r.question)
            answer = r.answers[0].text
            assert rule.setdefault(word, answer) == answer
            assert word == answer
    assert len(rule) >= 1


def test_entity_questions_tokenize_identically():
    bench = generate_synthetic_dataset(small_config())
    entity_records = [r for r in bench.records if r.question_types == [ENTITY_TYPE_TAG]]
    assert entity_records
    token_variants = {
        tuple(tokenize_baseline(r.question, bench.wordpiece_table, 32).texts())
        for r in entity_records
    }
    assert len(token_variants) == 1
    assert UNK_TOKEN in next(iter(token_variants))


def test_entity_label_marginal_is_balanced():
    bench = generate_synthetic_dataset(small_config(num_train=400))
    entity_records = [r for r in bench.records if r.question_types == [ENTITY_TYPE_TAG]]
    counts = {}
    for r in entity_records:
        counts[r.answers[0].text] = counts.get(r.answers[0].text, 0) + 1
    values = sorted(counts.values())
    assert len(counts) == 4
    assert values[-1] - values[0] <= 1  # cycled assignment: near-exact balance


def test_entity_vectors_are_injectable_and_separable():
    bench = generate_synthetic_dataset(small_config())
    keys = shared_vocabulary(bench.wiki_table, bench.wordpiece_table)
    fit = learn_alignment(bench.wiki_table, bench.wordpiece_table, keys)
    np.testing.assert_allclose(fit.matrix, bench.true_map, atol=1e-8)
    for r in bench.records:
        for m in r.meta_entities:
            assert bench.wiki_table.has(ENTITY, m.wiki_title)
    # mapped entity vectors cluster by class: nearest class centroid is its own
    mapped = {k: fit.matrix @ bench.wiki_table.get(ENTITY, k) for k in bench.entity_class}
    centroids = {}
    for key, cls in bench.entity_class.items():
        centroids.setdefault(cls, []).append(mapped[key])
    centroids = {c: np.mean(v, axis=0) for c, v in centroids.items()}
    for key, cls in bench.entity_class.items():
        dists = {c: np.linalg.norm(mapped[key] - cen) for c, cen in centroids.items()}
        assert min(dists, key=dists.get) == cls


def test_visual_features_match_records():
    bench = generate_synthetic_dataset(small_config())
    assert set(bench.region_features) == {r.image_ref for r in bench.records}
    feats, boxes = next(iter(bench.region_features.values()))
    assert feats.shape == (3, 5)
    assert boxes.shape == (3, 4)
    assert boxes.min() >= 0 and boxes.max() <= 1


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(num_answer_classes=99)
    with pytest.raises(ValueError):
        SynthConfig(control_fraction=1.5)
