"""Zero-shot classification, linear probing on frozen features, and finetuning."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data.augment import AugmentConfig, eval_view, probe_view
from .data.bpe import BpeVocab, bpe_encode, stack_tokens
from .encoders import SlipModel, VisionTransformer
from .errors import ConfigError, DimensionError, NumericalError
from .nn import Linear, Module
from .rng import derive_rng
from .train.optim import AdamW, layerwise_scales
from .train.schedule import cosine_lr

logger = logging.getLogger(__name__)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def _batched(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, batch_size: int) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([fn(x[i : i + batch_size]) for i in range(0, len(x), batch_size)], axis=0)


# ----------------------------------------------------------------------
# zero-shot
# ----------------------------------------------------------------------
@dataclass
class ZeroShotClassifier:
    class_names: list[str]
    templates: list[str]
    class_embeddings: np.ndarray  # K x d, unit rows

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def encode_texts(model: SlipModel, texts: Sequence[str], vocab: BpeVocab, batch_size: int = 64) -> np.ndarray:
    """CLIP-projected text embeddings (unnormalized), one row per text."""
    ctx = model.cfg.text.context_length
    ids, eos = stack_tokens([bpe_encode(t, vocab, ctx) for t in texts])
    out = []
    with T.no_grad():
        for i in range(0, len(texts), batch_size):
            wt = model.encode_text(ids[i : i + batch_size], eos[i : i + batch_size])
            out.append(model.clip_text_proj(wt).data)
    return np.concatenate(out, axis=0)


def build_zeroshot_classifier(
    model: SlipModel,
    class_names: Sequence[str],
    templates: Sequence[str],
    vocab: BpeVocab,
    normalize_templates: bool = True,
) -> ZeroShotClassifier:
    """Average the prompt-template embeddings of each class, then normalize.

    With ``normalize_templates`` each template embedding is made unit-norm
    before averaging.
    """
    if not class_names:
        raise ConfigError("zero-shot classifier needs at least one class")
    if not templates:
        raise ConfigError("zero-shot classifier needs at least one prompt template")
    for t in templates:
        if t.count("{}") != 1:
            raise ConfigError(f"prompt template {t!r} must contain exactly one '{{}}' slot")
    texts = [t.format(c) for c in class_names for t in templates]
    emb = encode_texts(model, texts, vocab).astype(np.float64)
    if normalize_templates:
        emb = _unit_rows(emb)
    emb = emb.reshape(len(class_names), len(templates), -1).mean(axis=1)
    return ZeroShotClassifier(list(class_names), list(templates), _unit_rows(emb))


def embed_images(model: SlipModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Unit-norm CLIP image embeddings for preprocessed ``B x S x S x 3`` views."""
    emb = _batched(lambda x: model.clip_image_proj(model.encode_image(x)).data, images, batch_size)
    return _unit_rows(emb.astype(np.float64))


def zeroshot_scores(classifier: ZeroShotClassifier, image_embeddings: np.ndarray) -> np.ndarray:
    if image_embeddings.shape[-1] != classifier.class_embeddings.shape[-1]:
        raise DimensionError(
            f"image embedding dim {image_embeddings.shape[-1]} vs classifier dim {classifier.class_embeddings.shape[-1]}"
        )
    return image_embeddings @ classifier.class_embeddings.T


def zeroshot_predict(
    classifier: ZeroShotClassifier,
    images: np.ndarray,
    model: SlipModel,
    labels: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, Optional[float]]:
    """Argmax of cosine similarity (ties go to the lowest class index)."""
    pred = np.argmax(zeroshot_scores(classifier, embed_images(model, images)), axis=1)
    acc = None if labels is None else float(np.mean(pred == np.asarray(labels)))
    return pred, acc


# ----------------------------------------------------------------------
# frozen features and the linear probe
# ----------------------------------------------------------------------
def _image_encoder(model: Union[SlipModel, VisionTransformer, "ImageClassifier"]) -> VisionTransformer:
    return model if isinstance(model, VisionTransformer) else model.image_encoder


def extract_features(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Encoder representation (normed class token) before any projection."""
    enc = _image_encoder(model)
    return _batched(lambda x: enc(x).data, images, batch_size)


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.weight_decay != 0.0:
            raise ConfigError("the linear probe is trained without weight decay")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("invalid probe hyperparameters")


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)


def train_linear_probe(
    features: Union[np.ndarray, Callable[[int], np.ndarray]],
    labels: np.ndarray,
    cfg: ProbeConfig = ProbeConfig(),
    num_classes: Optional[int] = None,
) -> LinearProbe:
    """SGD with momentum on softmax cross-entropy (per-example mean).

    ``features`` may be a callable ``epoch -> features`` to re-extract
    augmented features every epoch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    feats0 = features(0) if callable(features) else np.asarray(features)
    feats0 = feats0.astype(np.float64)
    n, d = feats0.shape
    if len(labels) != n:
        raise DimensionError(f"{n} feature rows vs {len(labels)} labels")
    k = int(num_classes if num_classes is not None else labels.max() + 1)
    if cfg.standardize:
        mean, scale = feats0.mean(axis=0), feats0.std(axis=0) + 1e-6
    else:
        mean, scale = np.zeros(d), np.ones(d)
    w = np.zeros((d, k))
    b = np.zeros(k)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    onehot = np.eye(k)[labels]
    for epoch in range(cfg.epochs):
        feats = feats0 if epoch == 0 or not callable(features) else np.asarray(features(epoch), dtype=np.float64)
        x_all = (feats - mean) / scale
        order = derive_rng(cfg.seed, "probe", epoch).permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            x = x_all[idx]
            z = x @ w + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            gw, gb = x.T @ g, g.sum(axis=0)
            vw = cfg.momentum * vw + gw
            vb = cfg.momentum * vb + gb
            w -= cfg.lr * vw
            b -= cfg.lr * vb
        if not np.all(np.isfinite(w)):
            raise NumericalError(f"linear probe diverged at epoch {epoch}")
    return LinearProbe(w, b, mean, scale)


def linear_probe(
    features_train,
    labels_train: np.ndarray,
    features_test: np.ndarray,
    labels_test: np.ndarray,
    cfg: ProbeConfig = ProbeConfig(),
) -> float:
    """Top-1 test accuracy of a linear classifier trained on frozen features."""
    labels_train = np.asarray(labels_train)
    labels_test = np.asarray(labels_test)
    k = int(max(labels_train.max(), labels_test.max()) + 1)
    unseen = sorted(set(labels_test.tolist()) - set(labels_train.tolist()))
    if unseen:
        logger.warning("classes %s appear in the test split but not in training; their test examples count as errors", unseen)
    probe = train_linear_probe(features_train, labels_train, cfg, num_classes=k)
    pred = probe.predict(np.asarray(features_test, dtype=np.float64))
    correct = (pred == labels_test) & ~np.isin(labels_test, unseen)
    return float(np.mean(correct))


# ----------------------------------------------------------------------
# finetuning
# ----------------------------------------------------------------------
class ImageClassifier(Module):
    """Image encoder plus a linear classification head on the class token."""

    def __init__(self, encoder: VisionTransformer, num_classes: int, rng: np.random.Generator, head_std: float = 0.02):
        super().__init__()
        self.image_encoder = encoder
        self.head = Linear(encoder.cfg.width, num_classes, rng, std=head_std)

    def __call__(self, images) -> T.Tensor:
        return self.head(self.image_encoder(images))


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    base_lr: float = 1e-3
    layer_decay: float = 0.65
    weight_decay: float = 0.05
    batch_size: int = 32
    warmup_epochs: float = 1.0
    beta2: float = 0.999
    encoder_lr_scale: float = 1.0  # 0 freezes the encoder
    augment: bool = True
    seed: int = 0


def finetune(
    model: Union[SlipModel, VisionTransformer],
    train_images: Sequence[np.ndarray],
    train_labels: np.ndarray,
    test_images: Sequence[np.ndarray],
    test_labels: np.ndarray,
    cfg: FinetuneConfig = FinetuneConfig(),
    aug: AugmentConfig = AugmentConfig(),
) -> float:
    """Train encoder and a fresh head end to end; return test top-1.

    The encoder is copied, so ``model`` is left untouched.  Learning rates
    follow ``base_lr * layer_decay ** (depth from the top)`` with AdamW and a
    cosine schedule.
    """
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    k = int(max(train_labels.max(), test_labels.max()) + 1)
    encoder = copy.deepcopy(_image_encoder(model))
    clf = ImageClassifier(encoder, k, derive_rng(cfg.seed, "finetune", "head"))
    named = list(clf.named_parameters())
    scales = layerwise_scales([n for n, _ in named], encoder.cfg.depth, cfg.layer_decay)
    for n in scales:
        if not n.startswith("head."):
            scales[n] *= cfg.encoder_lr_scale
    opt = AdamW(named, beta2=cfg.beta2, weight_decay=cfg.weight_decay, lr_scale=scales)

    n = len(train_images)
    spe = max(1, n // cfg.batch_size)
    total = cfg.epochs * spe
    warmup = min(int(round(cfg.warmup_epochs * spe)), total - 1)
    step = 0
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "finetune", "shuffle", epoch).permutation(n)
        for i in range(spe):
            idx = order[i * cfg.batch_size : (i + 1) * cfg.batch_size]
            rng = derive_rng(cfg.seed, "finetune", "augment", step)
            if cfg.augment:
                x = np.stack([probe_view(train_images[j], rng, aug) for j in idx])
            else:
                x = np.stack([eval_view(train_images[j], aug) for j in idx])
            with T.GradTape() as tape:
                loss = T.cross_entropy_logits(clf(x), train_labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericalError(f"finetune loss is non-finite at step {step}")
            grads = tape.backward(loss)
            opt.step({name: grads[p] for name, p in named if p in grads}, cosine_lr(step, total, warmup, cfg.base_lr))
            step += 1

    x_test = np.stack([eval_view(im, aug) for im in test_images])
    logits = _batched(lambda x: clf(x).data, x_test, 64)
    return float(np.mean(np.argmax(logits, axis=1) == test_labels))


# ----------------------------------------------------------------------
# retrieval
# ----------------------------------------------------------------------
def retrieval_top1(
    model: SlipModel,
    images: np.ndarray,
    token_ids: np.ndarray,
    eos: np.ndarray,
    texts: Optional[Sequence[str]] = None,
) -> float:
    """In-batch image-to-text top-1: each image must rank its own caption first.

    When ``texts`` is given, retrieving a different caption with identical
    text also counts as correct (duplicate captions are indistinguishable).
    """
    with T.no_grad():
        zi = model.clip_image_proj(model.encode_image(images)).data.astype(np.float64)
        zt = model.clip_text_proj(model.encode_text(token_ids, eos)).data.astype(np.float64)
    pred = np.argmax(_unit_rows(zi) @ _unit_rows(zt).T, axis=1)
    hit = pred == np.arange(len(images))
    if texts is not None:
        hit |= np.array([texts[p] == texts[i] for i, p in enumerate(pred)])
    return float(np.mean(hit))
