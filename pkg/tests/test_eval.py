import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import slip.evaluation as ev
from slip.data import AugmentConfig, SynthSpec, eval_view, synth_generate
from slip.encoders import SlipModel
from slip.errors import ConfigError, DimensionError
from slip.evaluation import (
    FinetuneConfig,
    ProbeConfig,
    ZeroShotClassifier,
    build_zeroshot_classifier,
    extract_features,
    finetune,
    linear_probe,
    retrieval_top1,
    zeroshot_predict,
    zeroshot_scores,
)

from .conftest import TINY

AUG = AugmentConfig(image_size=16)


def fake_text_encoder(monkeypatch, table):
    """Route build_zeroshot_classifier through fixed per-prompt vectors."""
    monkeypatch.setattr(ev, "encode_texts", lambda model, texts, vocab, batch_size=64: np.array([table[t] for t in texts], float))


class TestClassifier:
    def test_single_template_single_class(self, tiny_model, tiny_corpus):
        vocab = tiny_corpus[2]
        clf = build_zeroshot_classifier(tiny_model, ["red circle"], ["a photo of a {}."], vocab)
        e = ev.encode_texts(tiny_model, ["a photo of a red circle."], vocab)[0].astype(np.float64)
        np.testing.assert_allclose(clf.class_embeddings[0], e / np.linalg.norm(e), atol=1e-12)

    def test_duplicate_template(self, tiny_model, tiny_corpus):
        vocab = tiny_corpus[2]
        names = ["red circle", "blue cross"]
        a = build_zeroshot_classifier(tiny_model, names, ["a {}.", "a photo of a {}."], vocab)
        b = build_zeroshot_classifier(tiny_model, names, ["a {}.", "a photo of a {}.", "a photo of a {}."], vocab)
        c = build_zeroshot_classifier(tiny_model, names, ["a {}.", "a {}.", "a photo of a {}.", "a photo of a {}."], vocab)
        np.testing.assert_allclose(a.class_embeddings, c.class_embeddings, atol=1e-12)
        assert not np.allclose(a.class_embeddings, b.class_embeddings)

    def test_orthonormal_templates(self, monkeypatch):
        fake_text_encoder(monkeypatch, {"x a": [3.0, 0, 0], "y a": [0, 0.5, 0]})
        clf = build_zeroshot_classifier(None, ["a"], ["x {}", "y {}"], None)
        np.testing.assert_allclose(clf.class_embeddings[0], np.array([1, 1, 0]) / math.sqrt(2), atol=1e-12)

    def test_unnormalized_averaging_switch(self, monkeypatch):
        fake_text_encoder(monkeypatch, {"x a": [3.0, 0], "y a": [0, 1.0]})
        clf = build_zeroshot_classifier(None, ["a"], ["x {}", "y {}"], None, normalize_templates=False)
        np.testing.assert_allclose(clf.class_embeddings[0], np.array([3, 1]) / math.sqrt(10), atol=1e-12)

    def test_rows_unit_norm_and_template_order(self, tiny_model, tiny_corpus):
        vocab = tiny_corpus[2]
        names = ["red circle", "blue circle", "red cross"]
        t = ["a {}.", "a photo of a {}.", "a rendering of a {}."]
        a = build_zeroshot_classifier(tiny_model, names, t, vocab)
        b = build_zeroshot_classifier(tiny_model, names, t[::-1], vocab)
        np.testing.assert_allclose(np.linalg.norm(a.class_embeddings, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(a.class_embeddings, b.class_embeddings, atol=1e-12)

    @pytest.mark.parametrize("templates", [[], ["no slot"], ["{} and {}"]])
    def test_malformed_templates(self, tiny_model, tiny_corpus, templates):
        with pytest.raises(ConfigError):
            build_zeroshot_classifier(tiny_model, ["a"], templates, tiny_corpus[2])


def unit(rows):
    rows = np.asarray(rows, float)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class TestPredict:
    def test_single_class(self, tiny_model, tiny_corpus):
        manifest, images, vocab = tiny_corpus
        clf = build_zeroshot_classifier(tiny_model, ["red circle"], ["a {}."], vocab)
        views = np.stack([eval_view(images[r.image], AUG) for r in manifest.records[:10]])
        pred, _ = zeroshot_predict(clf, views, tiny_model)
        assert pred.tolist() == [0] * 10

    def test_self_similarity(self):
        clf = ZeroShotClassifier(list("abc"), ["{}"], unit(np.random.default_rng(0).normal(size=(3, 5))))
        assert np.argmax(zeroshot_scores(clf, clf.class_embeddings), axis=1).tolist() == [0, 1, 2]

    def test_ties_go_low(self):
        clf = ZeroShotClassifier(["a", "b"], ["{}"], unit([[1, 0], [1, 0]]))
        assert np.argmax(zeroshot_scores(clf, unit([[1, 1]])), axis=1).tolist() == [0]

    def test_dimension_mismatch(self):
        clf = ZeroShotClassifier(["a"], ["{}"], unit([[1, 0, 0]]))
        with pytest.raises(DimensionError):
            zeroshot_scores(clf, np.ones((2, 4)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_argmax_invariant_to_positive_rescaling(seed, c):
    r = np.random.default_rng(seed)
    clf = ZeroShotClassifier(list("abcd"), ["{}"], unit(r.normal(size=(4, 6))))
    emb = r.normal(size=(7, 6))
    a = np.argmax(zeroshot_scores(clf, emb), axis=1)
    b = np.argmax(zeroshot_scores(clf, c * emb), axis=1)
    assert a.tolist() == b.tolist()


def test_untrained_zeroshot_near_chance(tiny_corpus):
    manifest, images, vocab = tiny_corpus
    names = sorted({r.label for r in manifest.records})
    views = np.stack([eval_view(images[r.image], AUG) for r in manifest.records])
    labels = np.array([names.index(r.label) for r in manifest.records])
    accs = []
    for seed in range(10):
        clf = build_zeroshot_classifier(SlipModel(TINY, seed=seed), names, ["a photo of a {}."], vocab)
        accs.append(zeroshot_predict(clf, views, SlipModel(TINY, seed=seed), labels)[1])
    p, n = 1 / len(names), len(labels) * len(accs)
    assert abs(np.mean(accs) - p) <= 3 * math.sqrt(p * (1 - p) / n)


# ---------------------------------------------------------------------------
# features and probe
# ---------------------------------------------------------------------------
class TestFeatures:
    def test_shape_and_identical_inputs(self, tiny_model, tiny_corpus):
        img = eval_view(tiny_corpus[1][tiny_corpus[0].records[0].image], AUG)
        f = extract_features(tiny_model, np.stack([img, img, img]))
        assert f.shape == (3, TINY.vision.width)
        assert f[0].tobytes() == f[1].tobytes() == f[2].tobytes()

    def test_frozen(self, tiny_model, tiny_corpus):
        manifest, images, _ = tiny_corpus
        views = np.stack([eval_view(images[r.image], AUG) for r in manifest.records])
        before = extract_features(tiny_model, views)
        labels = np.arange(len(views)) % 4
        linear_probe(before, labels, before, labels, ProbeConfig(epochs=5))
        assert extract_features(tiny_model, views).tobytes() == before.tobytes()


class TestProbe:
    def test_separable(self):
        r = np.random.default_rng(0)
        x = np.concatenate([r.normal(-3, 0.5, (50, 2)), r.normal(3, 0.5, (50, 2))])
        y = np.repeat([0, 1], 50)
        assert linear_probe(x, y, x, y, ProbeConfig(epochs=20, batch_size=16)) == 1.0

    def test_shuffled_labels_chance(self):
        r = np.random.default_rng(1)
        x = r.normal(size=(400, 8))
        y_train = r.permutation(np.repeat(np.arange(4), 100))
        x_test = r.normal(size=(2000, 8))
        y_test = r.permutation(np.repeat(np.arange(4), 500))
        acc = linear_probe(x, y_train, x_test, y_test, ProbeConfig(epochs=20, batch_size=32))
        assert abs(acc - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 2000)

    def test_deterministic(self):
        r = np.random.default_rng(2)
        x, y = r.normal(size=(60, 5)), r.integers(0, 3, 60)
        a = ev.train_linear_probe(x, y, ProbeConfig(epochs=10, batch_size=8))
        b = ev.train_linear_probe(x, y, ProbeConfig(epochs=10, batch_size=8))
        assert a.weight.tobytes() == b.weight.tobytes() and a.bias.tobytes() == b.bias.tobytes()

    def test_unseen_test_class_counts_as_error(self, caplog):
        x = np.array([[0.0], [1.0], [5.0]])
        acc = linear_probe(x[:2], [0, 1], x, np.array([0, 1, 2]), ProbeConfig(epochs=50, batch_size=2))
        assert acc <= 2 / 3
        assert "not in training" in caplog.text

    def test_weight_decay_forbidden(self):
        with pytest.raises(ConfigError):
            ProbeConfig(weight_decay=1e-4)

    def test_augmented_re_extraction(self):
        r = np.random.default_rng(3)
        base = np.concatenate([r.normal(-2, 0.3, (20, 3)), r.normal(2, 0.3, (20, 3))])
        y = np.repeat([0, 1], 20)
        calls = []

        def feats(epoch):
            calls.append(epoch)
            return base + derive_noise(epoch)

        def derive_noise(epoch):
            return np.random.default_rng(epoch).normal(0, 0.1, base.shape)

        probe = ev.train_linear_probe(feats, y, ProbeConfig(epochs=4, batch_size=8))
        assert calls == [0, 1, 2, 3]
        assert (probe.predict(base) == y).all()


# ---------------------------------------------------------------------------
# finetuning
# ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def split():
    recs, imgs = synth_generate(SynthSpec(num_images=320, image_size=16), seed=5)
    names = sorted({r.label for r in recs})
    x = [imgs[r.image] for r in recs]
    y = np.array([names.index(r.label) for r in recs])
    return x[:192], y[:192], x[192:], y[192:]


class TestFinetune:
    def test_model_untouched(self, tiny_model, split):
        xtr, ytr, xte, yte = split
        before = {n: p.data.copy() for n, p in tiny_model.named_parameters()}
        finetune(tiny_model, xtr[:32], ytr[:32], xte[:8], yte[:8], FinetuneConfig(epochs=1, batch_size=16), AUG)
        for n, p in tiny_model.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])

    def test_unit_layer_decay_is_uniform_lr(self, monkeypatch, tiny_model, split):
        seen = {}
        real = ev.AdamW

        def spy(*args, **kw):
            seen.update(kw["lr_scale"])
            return real(*args, **kw)

        monkeypatch.setattr(ev, "AdamW", spy)
        xtr, ytr, xte, yte = split
        finetune(tiny_model, xtr[:16], ytr[:16], xte[:4], yte[:4], FinetuneConfig(epochs=1, batch_size=16, layer_decay=1.0), AUG)
        assert seen and set(seen.values()) == {1.0}

    def test_layer_decay_scales(self, monkeypatch, tiny_model, split):
        seen = {}
        real = ev.AdamW

        def spy(*args, **kw):
            seen.update(kw["lr_scale"])
            return real(*args, **kw)

        monkeypatch.setattr(ev, "AdamW", spy)
        xtr, ytr, xte, yte = split
        finetune(tiny_model, xtr[:16], ytr[:16], xte[:4], yte[:4], FinetuneConfig(epochs=1, batch_size=16), AUG)
        assert seen["head.weight"] == 1.0
        assert seen["image_encoder.pos_embed"] == pytest.approx(0.65 ** (TINY.vision.depth + 1))

    def test_frozen_encoder_matches_probe(self, split):
        xtr, ytr, xte, yte = split
        probe, frozen = [], []
        for seed in range(3):
            m = SlipModel(TINY, seed=seed)
            ftr = extract_features(m, np.stack([eval_view(x, AUG) for x in xtr]))
            fte = extract_features(m, np.stack([eval_view(x, AUG) for x in xte]))
            probe.append(linear_probe(ftr, ytr, fte, yte, ProbeConfig(epochs=200, batch_size=32)))
            cfg = FinetuneConfig(epochs=100, batch_size=32, encoder_lr_scale=0.0, augment=False, base_lr=3e-2, weight_decay=0.0, warmup_epochs=0)
            frozen.append(finetune(m, xtr, ytr, xte, yte, cfg, AUG))
        assert abs(np.mean(frozen) - np.mean(probe)) <= 0.02

    def test_finetune_beats_probe(self, split):
        xtr, ytr, xte, yte = split
        probe, tuned = [], []
        for seed in range(3):
            m = SlipModel(TINY, seed=seed)
            ftr = extract_features(m, np.stack([eval_view(x, AUG) for x in xtr]))
            fte = extract_features(m, np.stack([eval_view(x, AUG) for x in xte]))
            probe.append(linear_probe(ftr, ytr, fte, yte, ProbeConfig(epochs=200, batch_size=32)))
            tuned.append(finetune(m, xtr, ytr, xte, yte, FinetuneConfig(epochs=40, batch_size=32, base_lr=3e-3, augment=False), AUG))
        assert np.median(tuned) >= np.median(probe)


def test_retrieval_duplicates_count(tiny_model, tiny_corpus):
    from slip.data import bpe_encode, stack_tokens

    manifest, images, vocab = tiny_corpus
    views = np.stack([eval_view(images[r.image], AUG) for r in manifest.records[:4]])
    texts = ["same caption"] * 4
    ids, eos = stack_tokens([bpe_encode(t, vocab, 16) for t in texts])
    assert retrieval_top1(tiny_model, views, ids, eos, texts) == 1.0
    assert retrieval_top1(tiny_model, views, ids, eos) == 0.25
