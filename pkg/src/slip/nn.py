"""Parameter containers and transformer building blocks."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=True)


class Module:
    """Minimal parameter tree; attributes that are parameters or modules are registered in order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True, prefix: str = "") -> dict[str, list[str]]:
        """Copy matching arrays into parameters.

        With ``strict=False`` only names present in both are loaded; the return
        value lists ``loaded``, ``missing`` (left at their current values) and
        ``unexpected`` names.  ``prefix`` restricts loading to one subtree.
        """
        own = {n: p for n, p in self.named_parameters() if n.startswith(prefix)}
        missing = [n for n in own if n not in state]
        unexpected = [n for n in state if n.startswith(prefix) and n not in own]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        loaded = [n for n in own if n in state]
        # validate everything before touching any parameter
        for name in loaded:
            shape = np.shape(state[name])
            if shape != own[name].shape:
                raise DimensionError(f"{name}: checkpoint shape {shape} vs model shape {own[name].shape}")
        for name in loaded:
            own[name].data[...] = np.asarray(state[name]).astype(own[name].dtype)
        return {"loaded": loaded, "missing": missing, "unexpected": unexpected}

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = []
        for i, m in enumerate(modules):
            setattr(self, str(i), m)
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """``x @ weight + bias``; ``std=None`` means fan-in scaling ``d_in ** -0.5``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: Optional[float] = None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = parameter(trunc_normal(rng, (d_in, d_out), d_in**-0.5 if std is None else std))
        self.bias = parameter(np.zeros(d_out, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear({self.d_in}->{self.d_out}) got input of shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = parameter(np.ones(dim, np.float32))
        self.bias = parameter(np.zeros(dim, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, std: Optional[float] = None, out_std: Optional[float] = None):
        super().__init__()
        stds = [std] * (len(dims) - 2) + [std if out_std is None else out_std]
        self.layers = ModuleList([Linear(a, b, rng, std=s) for a, b, s in zip(dims[:-1], dims[1:], stds)])

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                x = T.gelu(x)
        return x


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over ``B x L x D`` inputs split into ``heads``.

    ``mask`` is an additive ``L x L`` array (large negative entries block attention).
    """
    b, n, d = q.shape
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(x: Tensor) -> Tensor:
        return T.transpose(x.reshape(b, n, heads, dh), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ T.transpose(kh)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + T.as_tensor(mask, like=scores)
    out = T.softmax(scores, axis=-1) @ vh
    return T.transpose(out, (0, 2, 1, 3)).reshape(b, n, d)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, std: Optional[float] = None, out_std: Optional[float] = None):
        super().__init__()
        self.heads = heads
        self.q = Linear(dim, dim, rng, std=std)
        self.k = Linear(dim, dim, rng, std=std)
        self.v = Linear(dim, dim, rng, std=std)
        self.out = Linear(dim, dim, rng, std=out_std)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        return self.out(attention(self.q(x), self.k(x), self.v(x), self.heads, mask))


class Block(Module):
    """Pre-norm transformer block.

    Initialization follows the usual depth-scaled scheme: attention inputs
    ``dim ** -0.5``, the first MLP layer ``(2 dim) ** -0.5``, and both
    residual output projections ``dim ** -0.5 / sqrt(2 depth)``.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator, depth: int = 1):
        super().__init__()
        attn_std = dim**-0.5
        out_std = attn_std * (2 * depth) ** -0.5
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng, attn_std, out_std)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP([dim, dim * mlp_ratio, dim], rng, std=(2 * dim) ** -0.5, out_std=out_std)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))
