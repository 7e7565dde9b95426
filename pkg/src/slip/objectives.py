"""Contrastive objectives: the CLIP image-text loss, the SimCLR view loss,
and their weighted sum.

All three take unnormalized projected embeddings and normalize internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class SlipLossConfig:
    ssl_scale: float = 1.0
    temperature: float = 0.1
    mask_magnitude: float = 1e9
    ssl_objective: str = "simclr"

    def __post_init__(self):
        if self.ssl_scale < 0:
            raise ConfigError(f"ssl_scale must be >= 0, got {self.ssl_scale}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        # float32 exp underflows below about -103; the masked logit must sit further than that
        if (self.mask_magnitude - 2.0) / self.temperature <= 104.0:
            raise ConfigError("mask_magnitude / temperature too small to suppress masked logits")
        if self.ssl_objective not in SSL_OBJECTIVES:
            raise ConfigError(f"unknown ssl_objective {self.ssl_objective!r}; available: {sorted(SSL_OBJECTIVES)}")


@dataclass
class EmbeddingBundle:
    """Projected embeddings for one batch.

    ``z1``/``z2`` may be ``None`` (CLIP-only training) and may carry a batch
    extent different from ``zi``/``zt`` (decoupled SSL stream).
    ``zi``/``zt`` may be ``None`` for SSL-only training.
    """

    zi: Optional[Tensor]
    zt: Optional[Tensor]
    z1: Optional[Tensor]
    z2: Optional[Tensor]
    logit_scale: Optional[Tensor] = None


def _labels(n: int) -> np.ndarray:
    return np.arange(n)


def clip_loss(zi: Tensor, zt: Tensor, logit_scale) -> Tensor:
    """Symmetric InfoNCE over the ``N x N`` image-text similarity matrix.

    ``logit_scale`` is the *log* scale; similarities are multiplied by its exp.
    """
    if zi.ndim != 2 or zi.shape != zt.shape:
        raise DimensionError(f"clip_loss: image embeddings {zi.shape} vs text embeddings {zt.shape}")
    zi = T.l2_normalize(zi)
    zt = T.l2_normalize(zt)
    s = T.as_tensor(logit_scale, like=zi)
    logits = T.exp(s) * (zi @ zt.T)
    labels = _labels(zi.shape[0])
    li = T.cross_entropy_logits(logits, labels)
    lt = T.cross_entropy_logits(logits.T, labels)
    return (li + lt) * 0.5


def simclr_loss(z1: Tensor, z2: Tensor, temperature: float = 0.1, mask_magnitude: float = 1e9) -> Tensor:
    """NT-Xent between two views.

    Row ``i`` of view 1 scores ``[z1_i . z2_j]_j`` followed by
    ``[z1_i . z1_j]_j`` with the self term pushed down by ``mask_magnitude``
    before the temperature division; view 2 is symmetric.
    """
    if z1.ndim != 2 or z1.shape != z2.shape:
        raise DimensionError(f"simclr_loss: view shapes {z1.shape} and {z2.shape} differ")
    z1 = T.l2_normalize(z1)
    z2 = T.l2_normalize(z2)
    n = z1.shape[0]
    mask = Tensor(np.eye(n, dtype=z1.dtype) * np.asarray(mask_magnitude, z1.dtype))
    labels = _labels(n)

    logit = z1 @ z2.T
    logit1 = z1 @ z1.T - mask
    logit2 = z2 @ z2.T - mask
    logit1 = T.concat([logit, logit1], axis=1)
    logit2 = T.concat([logit.T, logit2], axis=1)

    inv_tau = 1.0 / temperature
    l1 = T.cross_entropy_logits(logit1 * inv_tau, labels)
    l2 = T.cross_entropy_logits(logit2 * inv_tau, labels)
    return (l1 + l2) * 0.5


def _simclr_objective(z1: Tensor, z2: Tensor, cfg: SlipLossConfig) -> Tensor:
    return simclr_loss(z1, z2, cfg.temperature, cfg.mask_magnitude)


# Registry for the self-supervised term: (z1, z2, cfg) -> scalar loss.
SslObjective = Callable[[Tensor, Tensor, SlipLossConfig], Tensor]
SSL_OBJECTIVES: dict[str, SslObjective] = {"simclr": _simclr_objective}


def slip_loss(bundle: EmbeddingBundle, cfg: SlipLossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(total, clip_part, ssl_part)`` with ``total = clip + c * ssl``.

    Missing branches contribute a constant zero.
    """
    like = next(t for t in (bundle.zi, bundle.z1) if t is not None)
    zero = Tensor(np.zeros((), dtype=like.dtype))

    if bundle.zi is not None:
        if bundle.logit_scale is None:
            raise ValueError("slip_loss: CLIP branch present but no logit_scale in bundle")
        clip_part = clip_loss(bundle.zi, bundle.zt, bundle.logit_scale)
    else:
        clip_part = zero

    if bundle.z1 is not None:
        ssl_part = SSL_OBJECTIVES[cfg.ssl_objective](bundle.z1, bundle.z2, cfg)
    else:
        ssl_part = zero

    if bundle.z1 is None:
        total = clip_part
    elif bundle.zi is None:
        total = ssl_part * cfg.ssl_scale
    else:
        total = clip_part + ssl_part * cfg.ssl_scale
    return total, clip_part, ssl_part


LN_MAX_LOGIT_SCALE = math.log(100.0)
LN_INIT_LOGIT_SCALE = math.log(1 / 0.07)
