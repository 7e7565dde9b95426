"""From synthetic images to a training batch.

Run:  python demos/03_data.py
"""
import numpy as np

from slip.data import AugmentConfig, CorpusManifest, DataPipeline, SynthSpec, bpe_decode, bpe_encode, bpe_train, clean_caption, synth_generate

# A procedurally rendered corpus: each image holds one coloured shape and
# carries several captions.
records, images = synth_generate(SynthSpec(num_images=16, image_size=32), seed=0)
r = records[0]
print(r.image, r.label)
for c in r.captions:
    print("   ", c)

# Web captions arrive dirty; the cleaner removes markup and links.
print(clean_caption('A <b>red</b> circle &amp; friends https://example.com/x.jpg'))

# Byte-level BPE trained on the captions.  Decoding inverts encoding.
vocab = bpe_train([c for rec in records for c in rec.captions], 320)
seq = bpe_encode(r.captions[0], vocab, 24)
print("ids", seq.ids.tolist())
print("decoded:", bpe_decode(seq, vocab))

# The pipeline deals epoch-shuffled batches.  Batch k depends only on the
# seed and k, which is what makes resuming exact.
manifest = CorpusManifest(records)
manifest.preload(images)
pipe = DataPipeline(manifest, vocab, batch_size=4, seed=0, mode="slip", aug=AugmentConfig(image_size=32), context_length=24)
batch = pipe.batch(0)
print("global crops", batch.images_i.shape, "ssl views", batch.images_1.shape, "tokens", batch.token_ids.shape)
print("same batch again:", np.array_equal(batch.images_1, pipe.batch(0).images_1))
