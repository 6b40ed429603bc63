"""Evaluation-side tests: prompts, class embeddings, classification,
retrieval, linear probe, inference modes."""

import numpy as np
import pytest

from flip.data import CLASS_NAMES, Dataset, make_record
from flip.encoders import init_params, preset
from flip.errors import ConfigError
from flip.evaluation import (
    EvalReport,
    ProbeConfig,
    PromptSet,
    class_embeddings,
    desk_prompts,
    embed_images,
    eval_inference_modes,
    linear_probe,
    recall_at_k,
    zero_shot_classify,
)


@pytest.fixture(scope="module")
def tiny():
    cfg = preset("tiny")
    return cfg, init_params(cfg, seed=1)


@pytest.fixture(scope="module")
def small_dataset():
    images = np.stack([make_record(0, i)[0] for i in range(32)])
    captions = [make_record(0, i)[1] for i in range(32)]
    return Dataset(images=images, captions=captions)


class TestPromptSet:
    def test_desk_prompts_shape(self):
        p = desk_prompts()
        assert len(p.templates) == 7
        assert len(p.classes) == 16

    def test_placeholder_validation(self):
        with pytest.raises(ConfigError):
            PromptSet(templates=("a photo of {} and {}",), classes=("x",))
        with pytest.raises(ConfigError):
            PromptSet(templates=("no placeholder",), classes=("x",))
        with pytest.raises(ConfigError):
            PromptSet(templates=(), classes=("x",))


class TestClassEmbeddings:
    def test_single_template_is_its_embedding(self, tiny):
        cfg, params = tiny
        one = PromptSet(templates=("a photo of a {}.",), classes=("red circle",))
        from flip.evaluation import embed_texts

        direct = embed_texts(params, cfg, ["a photo of a red circle."])
        via = class_embeddings(one.classes, one, params, cfg)
        assert np.allclose(direct, via, atol=1e-6)

    def test_duplicate_templates_match_single(self, tiny):
        cfg, params = tiny
        single = PromptSet(templates=("an image of a {}.",), classes=("blue cross",))
        doubled = PromptSet(templates=("an image of a {}.",) * 2, classes=("blue cross",))
        a = class_embeddings(single.classes, single, params, cfg)
        b = class_embeddings(doubled.classes, doubled, params, cfg)
        assert np.allclose(a, b, atol=1e-6)

    def test_rows_unit_norm(self, tiny):
        cfg, params = tiny
        emb = class_embeddings(CLASS_NAMES, desk_prompts(), params, cfg)
        assert emb.shape == (16, cfg.embed_dim)
        assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5)

    def test_template_order_invariance(self, tiny):
        cfg, params = tiny
        fwd = desk_prompts()
        rev = PromptSet(templates=fwd.templates[::-1], classes=fwd.classes)
        a = class_embeddings(fwd.classes, fwd, params, cfg)
        b = class_embeddings(rev.classes, rev, params, cfg)
        assert np.allclose(a, b, atol=1e-6)


class TestZeroShot:
    def test_identity_when_classes_are_the_queries(self):
        rng = np.random.default_rng(0)
        emb = rng.standard_normal((8, 16))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        assert np.array_equal(zero_shot_classify(emb, emb), np.arange(8))

    def test_invariant_to_positive_scaling(self):
        rng = np.random.default_rng(1)
        img = rng.standard_normal((20, 6))
        cls = rng.standard_normal((5, 6))
        base = zero_shot_classify(img, cls)
        assert np.array_equal(base, zero_shot_classify(img * 17.0, cls))

    def test_tie_breaks_to_lowest_index(self):
        img = np.array([[1.0, 0.0]])
        cls = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert zero_shot_classify(img, cls)[0] == 0


class TestRecall:
    def test_gallery_equals_queries(self):
        rng = np.random.default_rng(0)
        e = rng.standard_normal((10, 8))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        assert recall_at_k(e, e, np.arange(10), 1) == 1.0

    def test_adversarial_distractor(self):
        q = np.array([[1.0, 0.0]])
        gallery = np.array([[0.0, 1.0], [1.0, 0.0]])  # true match is index 0
        assert recall_at_k(q, gallery, [0], 1) == 0.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((30, 6))
        g = rng.standard_normal((40, 6))
        truth = rng.integers(0, 40, size=30)
        values = [recall_at_k(q, g, truth, k) for k in (1, 5, 10, 40)]
        assert values == sorted(values)
        assert values[-1] == 1.0

    def test_k_beyond_gallery(self):
        with pytest.raises(ConfigError):
            recall_at_k(np.ones((2, 3)), np.ones((4, 3)), [0, 1], 5)


class TestLinearProbe:
    def test_separable_features_reach_one(self):
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1], 100)
        feats = rng.standard_normal((200, 4)) * 0.1
        feats[:, 0] += np.where(labels == 0, 2.0, -2.0)
        _, acc = linear_probe(feats, labels, ProbeConfig(epochs=60))
        assert acc == 1.0

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(1)
        k = 4
        n = 2000
        feats = rng.standard_normal((n, 6))
        labels = rng.integers(0, k, size=n)
        _, acc = linear_probe(feats, labels, ProbeConfig(epochs=20, seed=2))
        # 3 sigma binomial band around chance on the held-out fifth
        sigma = np.sqrt(0.25 * 0.75 / (n * 0.2))
        assert abs(acc - 1.0 / k) < 3 * sigma + 0.02

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            linear_probe(np.ones((10, 3)), np.zeros(10, dtype=int))


class TestInferenceModes:
    def test_three_reports_structure(self, tiny, small_dataset):
        cfg, params = tiny
        reports = eval_inference_modes(params, cfg, small_dataset, ratio=0.5)
        assert [r.mode for r in reports] == ["full", "masked", "ensemble"]
        for r in reports:
            assert 0.0 <= r.value <= 1.0
            assert r.metric == "zero_shot_acc"

    def test_report_json_fields(self):
        rep = EvalReport(metric="zero_shot_acc", value=0.5, mode="full", config="abc")
        import json

        decoded = json.loads(rep.to_json())
        assert set(decoded) == {"metric", "value", "mode", "config"}

    def test_ensemble_views_cover_every_patch(self, tiny, small_dataset):
        from flip.masking import complementary_views

        views = complementary_views(16, 0.75, np.random.default_rng(0), batch_size=4)
        stacked = np.sort(np.concatenate([v.visible for v in views], axis=1), axis=1)
        assert np.array_equal(stacked, np.tile(np.arange(16), (4, 1)))

    def test_ratio_zero_ensemble_equals_full(self, tiny, small_dataset):
        cfg, params = tiny
        reports = eval_inference_modes(params, cfg, small_dataset, ratio=0.0)
        full, masked, ensemble = reports
        assert ensemble.value == full.value == masked.value

    def test_ensemble_embedding_unit_norm(self, tiny, small_dataset):
        from flip.evaluation import _renormalize
        from flip.masking import complementary_views

        cfg, params = tiny
        n = len(small_dataset)
        views = complementary_views(16, 0.5, np.random.default_rng(0), batch_size=n)
        acc = np.zeros((n, cfg.embed_dim))
        for vm in views:
            acc += _renormalize(embed_images(params, cfg, small_dataset.images, mask=vm))
        emb = _renormalize(acc / len(views))
        assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5)
