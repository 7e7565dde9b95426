"""Train a small model for a few hundred steps and classify zero-shot.

Run:  python demos/04_train_and_evaluate.py   (about a minute on one core)
"""
import numpy as np

from slip.data import AugmentConfig, CorpusManifest, DataPipeline, SynthSpec, bpe_train, eval_view, synth_generate
from slip.encoders import ModelConfig, SlipModel, TextConfig, VitConfig
from slip.evaluation import build_zeroshot_classifier, extract_features, linear_probe, zeroshot_predict
from slip.objectives import SlipLossConfig
from slip.train import OptimConfig, Trainer

SIZE = 16
spec = SynthSpec(num_images=256, image_size=SIZE, caption_templates=["a photo of a {color} {shape} at the {position}.", "a {size} {color} {shape}."])
train_recs, train_imgs = synth_generate(spec, seed=0)
test_recs, test_imgs = synth_generate(spec, seed=1, prefix="test")
manifest = CorpusManifest(train_recs)
manifest.preload(train_imgs)
vocab = bpe_train([c for r in train_recs for c in r.captions], 300)

cfg = ModelConfig(
    vision=VitConfig(image_size=SIZE, patch_size=4, width=32, depth=2, heads=2, mlp_ratio=2),
    text=TextConfig(vocab_size=len(vocab), context_length=16, width=32, depth=1, heads=2, mlp_ratio=2),
    clip_dim=16, ssl_hidden=32, ssl_dim=16,
)
aug = AugmentConfig(image_size=SIZE)
pipe = DataPipeline(manifest, vocab, 32, seed=0, mode="slip", aug=aug, context_length=16)
optim = OptimConfig(base_lr=1e-3, batch_size=32, epochs=1, max_steps=300, warmup_steps=20)
trainer = Trainer(SlipModel(cfg, seed=0), pipe, optim, SlipLossConfig(ssl_scale=1.0), "slip")

for stop in (1, 100, 200, 300):
    row = trainer.run(until_step=stop)[-1]
    print(f"step {stop:3d}  total {row['total_loss']:.3f}  clip {row['clip_loss']:.3f}  ssl {row['ssl_loss']:.3f}")

# Zero-shot: class names become prompts, prompts become classifier rows.
names = spec.class_names
x = np.stack([eval_view(test_imgs[r.image], aug) for r in test_recs])
y = np.array([names.index(r.label) for r in test_recs])
clf = build_zeroshot_classifier(trainer.model, names, ["a photo of a {}.", "a {}."], vocab)
_, acc = zeroshot_predict(clf, x, trainer.model, y)
print(f"zero-shot accuracy {acc:.3f} (chance {1 / len(names):.3f})")

# Linear probe on frozen encoder features.
x_train = np.stack([eval_view(train_imgs[r.image], aug) for r in train_recs])
y_train = np.array([names.index(r.label) for r in train_recs])
print(f"linear probe accuracy {linear_probe(extract_features(trainer.model, x_train), y_train, extract_features(trainer.model, x), y):.3f}")
