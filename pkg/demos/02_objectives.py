"""The two contrastive objectives and how they combine.

Run:  python demos/02_objectives.py
"""
import math

import numpy as np

from slip import tensor as T
from slip.objectives import EmbeddingBundle, SlipLossConfig, clip_loss, simclr_loss, slip_loss

# Identical, orthogonal image and text embeddings with a unit scale: every
# row of the 2x2 similarity matrix is [1, 0], so each cross-entropy term is
# ln(1 + e^-1).
e = T.Tensor(np.eye(2, dtype=np.float32))
s = T.Tensor(np.float32(0.0))  # log of the scale, exp(0) = 1
print("clip, aligned      ", clip_loss(e, e, s).item(), "expected", math.log1p(math.exp(-1)))

# Collapsed embeddings carry no information: the loss is ln N.
ones = T.Tensor(np.ones((8, 4), np.float32))
print("clip, collapsed    ", clip_loss(ones, ones, s).item(), "expected", math.log(8))

# SimCLR over two views compares each embedding against 2N - 1 others; the
# self-similarity is masked out with a large negative constant.
print("simclr, collapsed  ", simclr_loss(T.Tensor(np.ones((2, 4), np.float32)), T.Tensor(np.ones((2, 4), np.float32))).item(), "expected", math.log(3))

# The joint objective is clip + c * ssl.  With c = 0 it is the CLIP loss.
rng = np.random.default_rng(0)
zi, zt, z1, z2 = (T.Tensor(rng.normal(size=(6, 8)).astype(np.float32)) for _ in range(4))
for c in (0.0, 0.5, 1.0):
    total, clip_part, ssl_part = slip_loss(EmbeddingBundle(zi, zt, z1, z2, s), SlipLossConfig(ssl_scale=c))
    print(f"c={c:<4} total {total.item():.4f} = {clip_part.item():.4f} + {c} * {ssl_part.item():.4f}")
