import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from slip.data import (
    BOS,
    EOS,
    PAD,
    AugmentConfig,
    CorpusManifest,
    CropConfig,
    DataPipeline,
    Record,
    SslAugmentConfig,
    SynthSpec,
    bpe_decode,
    bpe_encode,
    bpe_train,
    clean_caption,
    eval_view,
    global_crop,
    make_batch,
    read_manifest,
    sample_caption,
    ssl_augment,
    synth_generate,
    write_manifest,
)
from slip.data.augment import resize, sample_crop_box, to_float
from slip.data.bpe import BpeVocab
from slip.errors import ConfigError, DataError

FIXTURE = Path(__file__).parent / "fixtures" / "captions.jsonl"


# ---------------------------------------------------------------------------
# caption cleaning
# ---------------------------------------------------------------------------
def load_caption_cases():
    return [json.loads(line) for line in FIXTURE.read_text(encoding="utf-8").splitlines()]


def test_fixture_has_fifty_cases():
    assert len(load_caption_cases()) == 50


@pytest.mark.parametrize("case", load_caption_cases(), ids=lambda c: c["raw"][:30])
def test_clean_caption_fixture(case):
    assert clean_caption(case["raw"]) == case["clean"]
    assert clean_caption(case["clean"]) == case["clean"]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(list("ab <>/&;#x1lt gamp:.w") + ["http://", "www.", "&lt;", "&amp;", "<b>", "</i>"]), max_size=30).map("".join))
def test_clean_caption_idempotent(raw):
    once = clean_caption(raw)
    assert clean_caption(once) == once


def test_clean_accepts_bytes():
    assert clean_caption("a &amp; b".encode()) == "a & b"


class TestSampleCaption:
    def test_single(self, rng):
        assert all(sample_caption(["only"], rng) == "only" for _ in range(20))

    def test_two_captions_balanced(self):
        r = np.random.default_rng(0)
        n = 10_000
        hits = sum(sample_caption(["a", "b"], r) == "a" for _ in range(n))
        assert abs(hits - n / 2) <= 3 * np.sqrt(n * 0.25)

    def test_determinism(self):
        a = [sample_caption(list("xyz"), r) for r in [np.random.default_rng(3)] for _ in range(50)]
        b = [sample_caption(list("xyz"), r) for r in [np.random.default_rng(3)] for _ in range(50)]
        assert a == b

    def test_empty(self, rng):
        with pytest.raises(DataError):
            sample_caption([], rng)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------
def test_manifest_drops_empty_records(tmp_path, caplog):
    recs = [Record("a.png", ["<b></b>", "  "]), Record("b.png", ["fine &amp; dandy"])]
    write_manifest(tmp_path / "m.jsonl", recs)
    m = read_manifest(tmp_path / "m.jsonl")
    assert len(m) == 1 and m.dropped == 1
    assert m[0].captions == ["fine & dandy"]
    assert "dropped 1" in caplog.text


def test_manifest_bad_line(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"image": "a.png", "captions": "not a list"}\n')
    with pytest.raises(DataError, match=":1:"):
        read_manifest(tmp_path / "m.jsonl")


def test_image_formats_round_trip(tmp_path, rng):
    from slip.data import load_image, save_image

    px = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    for name in ("x.png", "x.ppm"):
        save_image(tmp_path / name, px)
        np.testing.assert_array_equal(load_image(tmp_path / name), px)
    with pytest.raises(DataError):
        load_image(tmp_path / "missing.png")


# ---------------------------------------------------------------------------
# BPE
# ---------------------------------------------------------------------------
def brute_force_merges(corpus, n):
    """Reference trainer: recount all adjacent pairs from scratch after every merge."""
    words = Counter()
    for text in corpus:
        words[tuple(bytes([b]) for b in text.encode())] += 1
    merges = []
    for _ in range(n):
        pairs = Counter()
        for w, c in words.items():
            for a, b in zip(w, w[1:]):
                pairs[(a, b)] += c
        if not pairs:
            break
        top = max(pairs.values())
        best = sorted(p for p, c in pairs.items() if c == top)[0]
        merges.append(best)
        new = Counter()
        for w, c in words.items():
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and (w[i], w[i + 1]) == best:
                    out.append(w[i] + w[i + 1])
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            new[tuple(out)] += c
        words = new
    return merges


class TestBpe:
    def test_only_pair(self):
        v = bpe_train(["aaaa"], 256 + 3 + 1)
        assert v.merges == [(b"a", b"a")]

    def test_low_lower_lowest(self):
        corpus = ["low", "lower", "lowest"]
        v = bpe_train(corpus, 256 + 3 + 6)
        assert v.merges == brute_force_merges(corpus, 6)
        assert v.merges[0] == (b"l", b"o")
        first_w = min(i for i, p in enumerate(v.merges) if b"w" in p[0] + p[1])
        assert first_w > 0

    def test_deterministic(self, tiny_corpus):
        manifest, _, _ = tiny_corpus
        caps = [c for r in manifest.records for c in r.captions]
        assert bpe_train(caps, 320).merges == bpe_train(caps, 320).merges

    def test_empty_string(self, tiny_corpus):
        seq = bpe_encode("", tiny_corpus[2], 8)
        assert seq.ids.tolist() == [BOS, EOS] + [PAD] * 6
        assert seq.eos_position == 1

    def test_truncation(self, tiny_corpus):
        seq = bpe_encode("a very long caption " * 20, tiny_corpus[2], 12)
        assert len(seq.ids) == 12
        assert seq.ids[-1] == EOS and seq.eos_position == 11 and seq.ids[0] == BOS

    def test_corpus_round_trip(self, tiny_corpus):
        manifest, _, vocab = tiny_corpus
        caps = [c for r in manifest.records for c in r.captions][:100]
        for c in caps:
            assert bpe_decode(bpe_encode(c, vocab, 77), vocab) == c

    def test_save_load(self, tmp_path, tiny_corpus):
        vocab = tiny_corpus[2]
        vocab.save(tmp_path / "v.bpe")
        again = BpeVocab.load(tmp_path / "v.bpe")
        assert again.merges == vocab.merges and again.lowercase == vocab.lowercase
        with pytest.raises(DataError):
            (tmp_path / "bad").write_text("nope\n")
            BpeVocab.load(tmp_path / "bad")

    def test_target_too_small(self):
        with pytest.raises(ConfigError):
            bpe_train(["x"], 100)


@pytest.fixture(scope="module")
def cased_vocab():
    return bpe_train(["The quick brown fox jumps over the lazy dog. 123 ümlaut 猫!"] * 3, 320, lowercase=False)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=40))
def test_bpe_round_trip_any_text(cased_vocab, text):
    assert cased_vocab.decode(cased_vocab.encode_ids(text)) == text


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=30))
def test_bpe_total_on_arbitrary_bytes(cased_vocab, raw):
    text = raw.decode("utf-8", errors="surrogateescape")
    ids = cased_vocab.encode_ids(text)
    assert all(0 <= i < len(cased_vocab) for i in ids)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
@pytest.fixture
def image(rng):
    return rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)


class TestGlobalCrop:
    def test_identity_crop_is_resize(self, image, rng):
        cfg = AugmentConfig(image_size=16, global_crop=CropConfig(scale=(1.0, 1.0), ratio=(1.0, 1.0), flip_p=0.0))
        np.testing.assert_allclose(global_crop(image, rng, cfg), eval_view(image, cfg), atol=1e-6)

    def test_deterministic(self, image):
        a = global_crop(image, np.random.default_rng(9))
        b = global_crop(image, np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_area_fraction_uniform(self):
        r = np.random.default_rng(0)
        frac = [np.prod(sample_crop_box(32, 32, r)[2:]) / (32 * 32) for _ in range(10_000)]
        assert stats.kstest(frac, stats.uniform(loc=0.5, scale=0.5).cdf).pvalue > 0.01

    def test_boxes_stay_inside(self):
        r = np.random.default_rng(1)
        for h, w in ((32, 32), (20, 50), (50, 20)):
            for _ in range(500):
                top, left, ch, cw = sample_crop_box(h, w, r, (0.08, 1.0))
                assert 0 <= top and top + ch <= h + 1e-9 and 0 <= left and left + cw <= w + 1e-9

    def test_bad_image(self, rng):
        with pytest.raises(DataError):
            global_crop(np.zeros((4, 4)), rng)


class TestSslAugment:
    def test_everything_off_is_resize(self, image, rng):
        off = SslAugmentConfig(crop=CropConfig((1.0, 1.0), (1.0, 1.0), 0.0), jitter_p=0, grayscale_p=0, blur_p=0)
        cfg = AugmentConfig(image_size=16, ssl=off)
        np.testing.assert_allclose(ssl_augment(image, rng, cfg), eval_view(image, cfg), atol=1e-6)

    def test_deterministic(self, image):
        assert ssl_augment(image, np.random.default_rng(4)).tobytes() == ssl_augment(image, np.random.default_rng(4)).tobytes()

    def test_different_states_differ(self, image):
        r = np.random.default_rng(5)
        views = [ssl_augment(image, r).tobytes() for _ in range(100)]
        assert len(set(views)) == 100

    def test_output_range(self, image, rng):
        out = ssl_augment(image, rng)
        assert out.shape == (32, 32, 3) and out.dtype == np.float32
        assert np.all(np.isfinite(out))


def test_resize_preserves_constant_image():
    img = np.full((10, 14, 3), 0.25, np.float32)
    np.testing.assert_allclose(resize(img, 6), 0.25, atol=1e-7)


def test_clip_augment_must_be_known():
    with pytest.raises(ConfigError):
        AugmentConfig(clip_augment="mixup")


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------
def two_sources(n=16):
    spec = SynthSpec(num_images=n, image_size=16)
    a_recs, a_imgs = synth_generate(spec, seed=1, prefix="clip")
    b_recs, b_imgs = synth_generate(spec, seed=2, prefix="ssl")
    a, b = CorpusManifest(a_recs), CorpusManifest(b_recs)
    a.preload(a_imgs)
    b.preload(b_imgs)
    return a, b


class TestMakeBatch:
    def test_clip_only_has_no_ssl_views(self, tiny_corpus, rng):
        manifest, _, vocab = tiny_corpus
        b = make_batch(manifest.records[:4], rng, "clip_only", manifest, vocab, AugmentConfig(image_size=16), 16)
        assert b.has_clip and not b.has_ssl
        assert all(v.x_1 is None and v.x_2 is None for v in b.bundles)

    def test_slip_views_share_source(self, tiny_corpus, rng):
        manifest, _, vocab = tiny_corpus
        b = make_batch(manifest.records[:4], rng, "slip", manifest, vocab, AugmentConfig(image_size=16), 16)
        assert all(v.ssl_source == v.source for v in b.bundles)
        assert b.images_i.shape == b.images_1.shape == b.images_2.shape == (4, 16, 16, 3)
        assert b.token_ids.shape == (4, 16)

    def test_decoupled_sources_disjoint(self, rng):
        clip_m, ssl_m = two_sources()
        vocab = bpe_train([c for r in clip_m.records for c in r.captions], 280)
        b = make_batch(clip_m.records[:6], rng, "decoupled", clip_m, vocab, AugmentConfig(image_size=16), 16, ssl_manifest=ssl_m)
        assert {v.source for v in b.bundles}.isdisjoint({v.ssl_source for v in b.bundles})

    def test_decoupled_needs_source(self, tiny_corpus, rng):
        manifest, _, vocab = tiny_corpus
        with pytest.raises(ConfigError):
            make_batch(manifest.records[:2], rng, "decoupled", manifest, vocab, AugmentConfig(image_size=16), 16)

    def test_clip_only_matches_slip_clip_views(self, tiny_corpus):
        manifest, _, vocab = tiny_corpus
        aug = AugmentConfig(image_size=16)
        a = make_batch(manifest.records[:5], np.random.default_rng(2), "slip", manifest, vocab, aug, 16)
        b = make_batch(manifest.records[:5], np.random.default_rng(2), "clip_only", manifest, vocab, aug, 16)
        assert a.images_i.tobytes() == b.images_i.tobytes()
        assert a.token_ids.tobytes() == b.token_ids.tobytes()

    def test_split(self, tiny_corpus, rng):
        manifest, _, vocab = tiny_corpus
        b = make_batch(manifest.records[:4], rng, "slip", manifest, vocab, AugmentConfig(image_size=16), 16)
        halves = b.split(2)
        np.testing.assert_array_equal(np.concatenate([h.images_1 for h in halves]), b.images_1)
        with pytest.raises(ConfigError):
            b.split(3)


class TestPipeline:
    def test_deterministic_per_step(self, tiny_corpus):
        manifest, _, vocab = tiny_corpus
        mk = lambda: DataPipeline(manifest, vocab, 8, seed=3, aug=AugmentConfig(image_size=16), context_length=16)  # noqa: E731
        for step in (0, 5, 9):
            a, b = mk().batch(step), mk().batch(step)
            assert a.images_1.tobytes() == b.images_1.tobytes()
            assert [v.source for v in a.bundles] == [v.source for v in b.bundles]

    def test_epoch_covers_corpus(self, tiny_corpus):
        manifest, _, vocab = tiny_corpus
        p = DataPipeline(manifest, vocab, 8, seed=0, context_length=16)
        seen = np.concatenate([p.indices(s) for s in range(p.steps_per_epoch)])
        assert sorted(seen) == list(range(len(manifest)))

    def test_batch_too_large(self, tiny_corpus):
        manifest, _, vocab = tiny_corpus
        with pytest.raises(ConfigError):
            DataPipeline(manifest, vocab, 64, seed=0)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------
class TestSynth:
    def test_balanced(self):
        recs, _ = synth_generate(SynthSpec(num_images=64, shapes=["circle", "square"], colors=["red", "blue"]), seed=0)
        counts = Counter(r.label for r in recs)
        assert len(counts) == 4 and set(counts.values()) == {16}

    def test_deterministic(self):
        _, a = synth_generate(SynthSpec(num_images=8), seed=4)
        _, b = synth_generate(SynthSpec(num_images=8), seed=4)
        assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_captions_name_color_and_shape(self):
        recs, _ = synth_generate(SynthSpec(num_images=24, shapes=["ring", "triangle", "diamond"], colors=["green", "purple"]), seed=0)
        for r in recs:
            color, shape = r.label.split(" ")
            assert all(color in c and shape in c for c in r.captions)

    def test_invalid_specs(self):
        for bad in (
            SynthSpec(shapes=["circle"]),
            SynthSpec(colors=["red", "red"]),
            SynthSpec(shapes=["circle", "hexagon"]),
            SynthSpec(num_images=3),
            SynthSpec(caption_templates=["a {shape}"]),
            SynthSpec(prompt_templates=["no slot"]),
        ):
            with pytest.raises(ConfigError):
                bad.validate()
