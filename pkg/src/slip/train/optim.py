"""AdamW with decoupled weight decay, per-parameter lr multipliers and
layerwise learning-rate decay."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from ..errors import ContractError, MappingError, NumericalError
from ..tensor import Tensor

# leaf names never decayed: layer-norm gains, biases, the log logit scale
NO_DECAY_LEAVES = ("gain", "bias")
NO_DECAY_NAMES = ("logit_scale",)


def excluded_from_decay(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in NO_DECAY_LEAVES or name in NO_DECAY_NAMES


@dataclass
class AdamW:
    """Bias-corrected Adam with decoupled decay ``p <- p * (1 - lr * wd)``.

    ``params`` is an ordered list of ``(name, tensor)``.  ``lr_scale`` maps
    names to lr multipliers (default 1); ``clamp_max`` maps names to an upper
    bound enforced after each step.
    """

    params: list[tuple[str, Tensor]]
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_scale: dict[str, float] = field(default_factory=dict)
    clamp_max: dict[str, float] = field(default_factory=dict)
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names")
        self._by_name = dict(self.params)
        for n, p in self.params:
            self.m.setdefault(n, np.zeros_like(p.data))
            self.v.setdefault(n, np.zeros_like(p.data))

    @property
    def decayed(self) -> list[str]:
        return [n for n, _ in self.params if not excluded_from_decay(n)]

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        """Apply one update.  Parameters absent from ``grads`` are left untouched."""
        for n, g in grads.items():
            if n not in self._by_name:
                raise ContractError(f"gradient for unknown parameter {n!r}")
            if g.shape != self._by_name[n].shape:
                raise ContractError(f"{n}: gradient shape {g.shape} vs parameter {self._by_name[n].shape}")
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter {n!r} at optimizer step {self.step_count + 1}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for n, p in self.params:
            g = grads.get(n)
            if g is None:
                continue
            dt = p.data.dtype.type
            lr_p = lr * self.lr_scale.get(n, 1.0)
            if self.weight_decay and not excluded_from_decay(n):
                p.data *= dt(1.0 - lr_p * self.weight_decay)
            m, v = self.m[n], self.v[n]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            p.data -= dt(lr_p) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            hi = self.clamp_max.get(n)
            if hi is not None:
                np.minimum(p.data, dt(hi), out=p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n, _ in self.params:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for n, p in self.params:
            for key, store in (("m", self.m), ("v", self.v)):
                a = arrays.get(f"{key}.{n}")
                if a is None:
                    raise ContractError(f"optimizer state missing {key}.{n}")
                store[n] = np.array(a, dtype=p.dtype)
        self.step_count = int(step_count)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamW, lr: float) -> AdamW:
    """Functional form: one AdamW update of ``params`` using ``state``."""
    if set(params) != set(state._by_name) or any(params[n] is not state._by_name[n] for n in params):
        raise ContractError("params do not match the optimizer state")
    state.step(grads, lr)
    return state


# ----------------------------------------------------------------------
# layerwise lr decay
# ----------------------------------------------------------------------
_EMBED = re.compile(r"^(?:image_encoder\.)?(?:patch_embed\.\w+|cls_token|pos_embed)$")
_BLOCK = re.compile(r"^(?:image_encoder\.)?blocks\.(\d+)\.")
_HEAD = re.compile(r"^(?:(?:image_encoder\.)?ln_final\.\w+|head\.\w+)$")


def layer_depth(param_path: str, num_layers: int) -> int:
    """Embeddings -> 0, transformer block k -> k + 1, final norm and head -> num_layers + 1."""
    if _EMBED.match(param_path):
        return 0
    m = _BLOCK.match(param_path)
    if m:
        k = int(m.group(1))
        if k >= num_layers:
            raise MappingError(f"{param_path!r}: block index {k} >= num_layers {num_layers}")
        return k + 1
    if _HEAD.match(param_path):
        return num_layers + 1
    raise MappingError(f"cannot assign a layer depth to parameter {param_path!r}")


def layerwise_lr_scale(param_path: str, num_layers: int, decay: float) -> float:
    """``decay ** (num_layers + 1 - depth)``; the head gets exactly 1."""
    if not 0 < decay <= 1:
        raise ContractError(f"layer decay must lie in (0, 1], got {decay}")
    return decay ** (num_layers + 1 - layer_depth(param_path, num_layers))


def layerwise_scales(names: Iterable[str], num_layers: int, decay: float) -> dict[str, float]:
    return {n: layerwise_lr_scale(n, num_layers, decay) for n in names}
