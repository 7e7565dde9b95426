"""Batch assembly for every training mode.

Randomness per batch comes from one generator; each record then gets its
own seed and each view (``crop``, ``aug1``, ``aug2``, ``caption``) its own
sub-stream.  A CLIP-only batch therefore contains exactly the global crops
and captions that a SLIP batch built from the same generator contains.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError
from ..rng import derive_rng
from .augment import AugmentConfig, clip_view, ssl_augment
from .bpe import BpeVocab, TokenSequence, bpe_encode, stack_tokens
from .manifest import CorpusManifest, Record
from .text import sample_caption

MODES = ("slip", "clip_only", "ssl_only", "decoupled")

_VIEW_KEYS = {"crop": 1, "aug1": 2, "aug2": 3, "caption": 4}


@dataclass
class ViewBundle:
    x_i: Optional[np.ndarray]
    x_1: Optional[np.ndarray]
    x_2: Optional[np.ndarray]
    y_t: Optional[TokenSequence]
    source: str
    ssl_source: Optional[str]
    caption: Optional[str]
    rng_stamp: int


@dataclass
class Batch:
    mode: str
    bundles: list[ViewBundle]
    images_i: Optional[np.ndarray] = None
    images_1: Optional[np.ndarray] = None
    images_2: Optional[np.ndarray] = None
    token_ids: Optional[np.ndarray] = None
    eos: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.bundles)

    @property
    def has_clip(self) -> bool:
        return self.images_i is not None

    @property
    def has_ssl(self) -> bool:
        return self.images_1 is not None

    def split(self, parts: int) -> list["Batch"]:
        """Equal micro-batches (for gradient accumulation)."""
        n = len(self)
        if n % parts:
            raise ConfigError(f"batch of {n} not divisible into {parts} micro-batches")
        k = n // parts

        def sl(a, i):
            return None if a is None else a[i * k : (i + 1) * k]

        return [
            Batch(
                self.mode,
                self.bundles[i * k : (i + 1) * k],
                sl(self.images_i, i),
                sl(self.images_1, i),
                sl(self.images_2, i),
                sl(self.token_ids, i),
                sl(self.eos, i),
            )
            for i in range(parts)
        ]


def _view_rng(record_seed: int, view: str) -> np.random.Generator:
    return np.random.default_rng([record_seed, _VIEW_KEYS[view]])


def make_batch(
    records: Sequence[Record],
    rng: np.random.Generator,
    mode: str,
    manifest: CorpusManifest,
    vocab: Optional[BpeVocab],
    aug: AugmentConfig = AugmentConfig(),
    context_length: int = 77,
    ssl_records: Optional[Sequence[Record]] = None,
    ssl_manifest: Optional[CorpusManifest] = None,
) -> Batch:
    """Build one batch of views.

    ``slip``: global crop, two SSL views and a caption per record.
    ``clip_only``: global crop and caption.  ``ssl_only``: two SSL views.
    ``decoupled``: global crop and caption from ``records``; the SSL views
    come from ``ssl_records`` (or a draw from ``ssl_manifest``).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown batch mode {mode!r}; expected one of {MODES}")
    need_text = mode != "ssl_only"
    if need_text and vocab is None:
        raise ConfigError(f"mode {mode!r} needs a tokenizer vocab")

    seeds = rng.integers(0, 2**63 - 1, size=len(records))
    if mode == "decoupled":
        if ssl_records is None:
            if ssl_manifest is None:
                raise ConfigError("decoupled mode needs an independent SSL source")
            pick = rng.choice(len(ssl_manifest), size=len(records), replace=len(ssl_manifest) < len(records))
            ssl_records = [ssl_manifest[int(i)] for i in pick]
        if len(ssl_records) != len(records):
            raise ConfigError("decoupled SSL batch must match the CLIP batch size")
        ssl_seeds = rng.integers(0, 2**63 - 1, size=len(records))
        ssl_man = ssl_manifest if ssl_manifest is not None else manifest
    bundles = []
    for j, rec in enumerate(records):
        seed = int(seeds[j])
        img = manifest.image(rec)
        x_i = x_1 = x_2 = None
        y_t = caption = None
        ssl_src = None
        if mode in ("slip", "clip_only", "decoupled"):
            x_i = clip_view(img, _view_rng(seed, "crop"), aug)
            caption = sample_caption(rec.captions, _view_rng(seed, "caption"))
            y_t = bpe_encode(caption, vocab, context_length)
        if mode in ("slip", "ssl_only"):
            x_1 = ssl_augment(img, _view_rng(seed, "aug1"), aug)
            x_2 = ssl_augment(img, _view_rng(seed, "aug2"), aug)
            ssl_src = rec.image
        elif mode == "decoupled":
            srec = ssl_records[j]
            simg = ssl_man.image(srec)
            sseed = int(ssl_seeds[j])
            x_1 = ssl_augment(simg, _view_rng(sseed, "aug1"), aug)
            x_2 = ssl_augment(simg, _view_rng(sseed, "aug2"), aug)
            ssl_src = srec.image
        bundles.append(ViewBundle(x_i, x_1, x_2, y_t, rec.image, ssl_src, caption, seed))

    batch = Batch(mode, bundles)
    if bundles[0].x_i is not None:
        batch.images_i = np.stack([b.x_i for b in bundles])
        batch.token_ids, batch.eos = stack_tokens([b.y_t for b in bundles])
    if bundles[0].x_1 is not None:
        batch.images_1 = np.stack([b.x_1 for b in bundles])
        batch.images_2 = np.stack([b.x_2 for b in bundles])
    return batch


@dataclass
class DataPipeline:
    """Deterministic epoch-shuffled batches: ``batch(step)`` depends only on (seed, step)."""

    manifest: CorpusManifest
    vocab: Optional[BpeVocab]
    batch_size: int
    seed: int
    mode: str = "slip"
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    context_length: int = 77
    ssl_manifest: Optional[CorpusManifest] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown batch mode {self.mode!r}")
        if self.batch_size > len(self.manifest):
            raise ConfigError(f"batch_size {self.batch_size} exceeds corpus size {len(self.manifest)}")
        if self.mode == "decoupled":
            if self.ssl_manifest is None:
                raise ConfigError("decoupled mode needs an independent SSL manifest")
            if self.batch_size > len(self.ssl_manifest):
                raise ConfigError("batch_size exceeds SSL corpus size")

    @property
    def steps_per_epoch(self) -> int:
        return len(self.manifest) // self.batch_size

    def indices(self, step: int, stream: str = "shuffle", n: Optional[int] = None) -> np.ndarray:
        n = len(self.manifest) if n is None else n
        spe = n // self.batch_size
        epoch, pos = divmod(step, spe)
        perm = derive_rng(self.seed, stream, epoch).permutation(n)
        return perm[pos * self.batch_size : (pos + 1) * self.batch_size]

    def batch(self, step: int) -> Batch:
        records = [self.manifest[int(i)] for i in self.indices(step)]
        ssl_records = None
        if self.mode == "decoupled":
            idx = self.indices(step, "ssl_shuffle", len(self.ssl_manifest))
            ssl_records = [self.ssl_manifest[int(i)] for i in idx]
        return make_batch(
            records,
            derive_rng(self.seed, "augment", step),
            self.mode,
            self.manifest,
            self.vocab,
            self.aug,
            self.context_length,
            ssl_records=ssl_records,
            ssl_manifest=self.ssl_manifest,
        )
