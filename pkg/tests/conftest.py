import numpy as np
import pytest

from slip.data import CorpusManifest, SynthSpec, bpe_train, synth_generate
from slip.encoders import ModelConfig, SlipModel, TextConfig, VitConfig

TINY = ModelConfig(
    vision=VitConfig(image_size=16, patch_size=8, width=16, depth=2, heads=2, mlp_ratio=2),
    text=TextConfig(vocab_size=300, context_length=16, width=16, depth=1, heads=2, mlp_ratio=2),
    clip_dim=8,
    ssl_hidden=16,
    ssl_dim=8,
)


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = SynthSpec(num_images=32, image_size=16)
    records, images = synth_generate(spec, seed=0)
    manifest = CorpusManifest(records)
    manifest.preload(images)
    vocab = bpe_train([c for r in records for c in r.captions], 300)
    return manifest, images, vocab


@pytest.fixture
def tiny_model():
    return SlipModel(TINY, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
