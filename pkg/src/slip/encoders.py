"""Image and text encoders plus the CLIP and SSL projection heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Block, LayerNorm, Linear, MLP, Module, ModuleList, parameter, trunc_normal
from .objectives import LN_INIT_LOGIT_SCALE, LN_MAX_LOGIT_SCALE
from .tensor import Tensor


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    pooling: str = "class"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.pooling != "class":
            raise ConfigError("only class-token pooling is supported")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 512
    context_length: int = 77
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    causal: bool = True

    def __post_init__(self):
        if self.context_length < 3:
            raise ConfigError("context_length must be >= 3 (BOS, one token, EOS)")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ModelConfig:
    vision: VitConfig = field(default_factory=VitConfig)
    text: TextConfig = field(default_factory=TextConfig)
    clip_dim: int = 64
    ssl_hidden: int = 128
    ssl_dim: int = 32
    init_std: float = 0.02
    init_logit_scale: float = LN_INIT_LOGIT_SCALE
    max_logit_scale: float = LN_MAX_LOGIT_SCALE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        vision = VitConfig(**d.pop("vision", {}))
        text = TextConfig(**d.pop("text", {}))
        return cls(vision=vision, text=text, **d)


VISION_PRESETS = {
    "vit-nano": VitConfig(image_size=32, patch_size=8, width=64, depth=4, heads=4),
    "vit-micro": VitConfig(image_size=64, patch_size=16, width=128, depth=6, heads=4),
    # full-scale shapes, for parameter accounting only
    "vit-s/16": VitConfig(image_size=224, patch_size=16, width=384, depth=12, heads=6),
    "vit-b/16": VitConfig(image_size=224, patch_size=16, width=768, depth=12, heads=12),
    "vit-l/16": VitConfig(image_size=224, patch_size=16, width=1024, depth=24, heads=16),
}

TEXT_PRESETS = {
    "text-desk": TextConfig(vocab_size=512, context_length=32, width=64, depth=4, heads=4),
    "clip-text": TextConfig(vocab_size=49408, context_length=77, width=512, depth=12, heads=8),
}

MODEL_PRESETS = {
    "nano": ModelConfig(VISION_PRESETS["vit-nano"], TEXT_PRESETS["text-desk"], clip_dim=64, ssl_hidden=128, ssl_dim=32),
    "micro": ModelConfig(VISION_PRESETS["vit-micro"], TEXT_PRESETS["text-desk"], clip_dim=64, ssl_hidden=256, ssl_dim=64),
    "vit-b/16": ModelConfig(VISION_PRESETS["vit-b/16"], TEXT_PRESETS["clip-text"], clip_dim=512, ssl_hidden=4096, ssl_dim=256),
}


# ----------------------------------------------------------------------
# parameter accounting
# ----------------------------------------------------------------------
def block_param_count(width: int, mlp_ratio: int) -> int:
    d, h = width, width * mlp_ratio
    return 2 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)


def vit_param_count(cfg: VitConfig) -> int:
    d = cfg.width
    patch = cfg.patch_size**2 * 3 * d + d
    tokens = d + (cfg.num_patches + 1) * d
    return patch + tokens + cfg.depth * block_param_count(d, cfg.mlp_ratio) + 2 * d


def text_param_count(cfg: TextConfig) -> int:
    d = cfg.width
    return cfg.vocab_size * d + cfg.context_length * d + cfg.depth * block_param_count(d, cfg.mlp_ratio) + 2 * d


def model_param_count(cfg: ModelConfig) -> int:
    v, t = cfg.vision.width, cfg.text.width
    h, s = cfg.ssl_hidden, cfg.ssl_dim
    heads = v * cfg.clip_dim + t * cfg.clip_dim + (v * h + h) + (h * h + h) + (h * s + s)
    return vit_param_count(cfg.vision) + text_param_count(cfg.text) + heads + 1


# ----------------------------------------------------------------------
# encoders
# ----------------------------------------------------------------------
def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``B x H x W x C`` pixels -> ``B x (H/p * W/p) x (p*p*C)`` row-major patches."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


class VisionTransformer(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.patch_embed = Linear(cfg.patch_size**2 * 3, d, rng, std=std)
        self.cls_token = parameter(trunc_normal(rng, (d,), std))
        self.pos_embed = parameter(trunc_normal(rng, (cfg.num_patches + 1, d), std))
        self.blocks = ModuleList([Block(d, cfg.heads, cfg.mlp_ratio, rng, cfg.depth) for _ in range(cfg.depth)])
        self.ln_final = LayerNorm(d)

    def embed(self, images) -> Tensor:
        """Patch tokens with the class token prepended and positions added: ``B x (T+1) x D``."""
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise DimensionError(f"expected B x {cfg.image_size} x {cfg.image_size} x 3 images, got {x.shape}")
        patches = T.Tensor(patchify(x.astype(self.pos_embed.dtype, copy=False), cfg.patch_size))
        tokens = self.patch_embed(patches)
        cls = T.broadcast_to(self.cls_token, (x.shape[0], 1, cfg.width))
        return T.concat([cls, tokens], axis=1) + self.pos_embed

    def __call__(self, images) -> Tensor:
        x = self.embed(images)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_final(x[:, 0, :])


class TextTransformer(Module):
    def __init__(self, cfg: TextConfig, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.token_embed = parameter(trunc_normal(rng, (cfg.vocab_size, d), std))
        self.pos_embed = parameter(trunc_normal(rng, (cfg.context_length, d), std))
        self.blocks = ModuleList([Block(d, cfg.heads, cfg.mlp_ratio, rng, cfg.depth) for _ in range(cfg.depth)])
        self.ln_final = LayerNorm(d)
        n = cfg.context_length
        self._mask = np.triu(np.full((n, n), -1e9, np.float32), k=1) if cfg.causal else None

    def __call__(self, ids: np.ndarray, eos_positions: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        eos = np.asarray(eos_positions)
        if ids.ndim != 2 or ids.shape[1] != self.cfg.context_length:
            raise DimensionError(f"expected B x {self.cfg.context_length} token ids, got {ids.shape}")
        x = T.embedding(self.token_embed, ids) + self.pos_embed
        mask = None if self._mask is None else self._mask.astype(x.dtype, copy=False)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_final(x[np.arange(len(ids)), eos])


class SlipModel(Module):
    """Shared image encoder, text encoder, CLIP projections, SSL projector and log logit scale."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed) if rng is None else rng
        self.cfg = cfg
        std = cfg.init_std
        self.image_encoder = VisionTransformer(cfg.vision, rng, std)
        self.text_encoder = TextTransformer(cfg.text, rng, std)
        self.clip_image_proj = Linear(cfg.vision.width, cfg.clip_dim, rng, bias=False, std=std)
        self.clip_text_proj = Linear(cfg.text.width, cfg.clip_dim, rng, bias=False, std=std)
        self.ssl_projector = MLP([cfg.vision.width, cfg.ssl_hidden, cfg.ssl_hidden, cfg.ssl_dim], rng)
        self.logit_scale = parameter(np.asarray(cfg.init_logit_scale, np.float32))

    def encode_image(self, images) -> Tensor:
        return self.image_encoder(images)

    def encode_text(self, ids, eos_positions) -> Tensor:
        return self.text_encoder(ids, eos_positions)

    def project_clip(self, wi: Optional[Tensor], wt: Optional[Tensor]) -> tuple[Optional[Tensor], Optional[Tensor]]:
        zi = self.clip_image_proj(wi) if wi is not None else None
        zt = self.clip_text_proj(wt) if wt is not None else None
        return zi, zt

    def project_ssl(self, w1: Tensor, w2: Tensor) -> tuple[Tensor, Tensor]:
        if w1.shape != w2.shape:
            raise DimensionError(f"SSL views have different shapes {w1.shape} and {w2.shape}")
        return self.ssl_projector(w1), self.ssl_projector(w2)

    def clamp_logit_scale(self) -> None:
        np.minimum(self.logit_scale.data, np.asarray(self.cfg.max_logit_scale, self.logit_scale.dtype), out=self.logit_scale.data)


# functional aliases
def patch_embed(image, model: SlipModel) -> Tensor:
    """One ``H x W x 3`` image (or a batch) -> class token + patch tokens with positions."""
    x = image.data if isinstance(image, Tensor) else np.asarray(image)
    if x.ndim == 3:
        return model.image_encoder.embed(x[None])[0]
    return model.image_encoder.embed(x)


def image_encode(views, model: SlipModel) -> Tensor:
    return model.encode_image(views)


def text_encode(ids, eos_positions, model: SlipModel) -> Tensor:
    return model.encode_text(ids, eos_positions)


def project_clip(wi: Tensor, wt: Tensor, model: SlipModel):
    return model.project_clip(wi, wt)


def project_ssl(w1: Tensor, w2: Tensor, model: SlipModel):
    return model.project_ssl(w1, w2)
