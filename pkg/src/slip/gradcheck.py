"""Finite-difference gradient checking.

The numeric side always runs in float64.  The analytic side runs in the
requested precision, so a float32 check measures the real training path.

Error metric, per element::

    err = |analytic - numeric| / max(1, |numeric|)

i.e. relative for gradients larger than one and absolute below that, which
keeps float32 round-off on near-zero entries from dominating the report.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ProbeError

Fn = Callable[..., T.Tensor]


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    per_input: list[float]
    tolerance: float
    precision: str

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)


def _eval64(f: Fn, arrays: Sequence[np.ndarray]) -> float:
    with T.precision(np.float64):
        out = f(*[T.Tensor(a.astype(np.float64)) for a in arrays])
    val = float(np.asarray(out.data, dtype=np.float64).reshape(()))
    return val


def numeric_gradient(f: Fn, arrays: Sequence[np.ndarray], index: int, h_scale: float = 1e-3, richardson: bool = True) -> np.ndarray:
    """Central differences with step ``h = h_scale * max(1, |x|)``.

    With ``richardson`` the step-h and step-h/2 estimates are combined as
    ``(4 D(h/2) - D(h)) / 3``, cancelling the O(h^2) truncation term.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)

    def probe() -> float:
        val = _eval64(f, base)
        if not np.isfinite(val):
            raise ProbeError(f"non-finite function value {val} at probe point")
        return val

    def central(i: int, h: float) -> float:
        orig = flat[i]
        flat[i] = orig + h
        fp = probe()
        flat[i] = orig - h
        fm = probe()
        flat[i] = orig
        return (fp - fm) / (2 * h)

    for i in range(flat.size):
        h = h_scale * max(1.0, abs(flat[i]))
        d1 = central(i, h)
        gflat[i] = (4 * central(i, h / 2) - d1) / 3 if richardson else d1
    return grad


def analytic_gradient(f: Fn, arrays: Sequence[np.ndarray], dtype=np.float32) -> list[np.ndarray]:
    with T.precision(dtype):
        leaves = [T.Tensor(np.asarray(a, dtype=dtype), requires_grad=True) for a in arrays]
        with T.GradTape() as tape:
            out = f(*leaves)
        grads = tape.backward(out)
    return [grads.get(leaf, np.zeros_like(leaf.data)).astype(np.float64) for leaf in leaves]


def grad_check(
    f: Fn,
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    dtype=np.float32,
    name: str = "f",
    h_scale: float = 1e-3,
    richardson: bool = True,
    wrt: Optional[Sequence[int]] = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` against finite differences."""
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    analytic = analytic_gradient(f, arrays, dtype=dtype)
    which = range(len(arrays)) if wrt is None else wrt
    errs = []
    for i in which:
        num = numeric_gradient(f, arrays, i, h_scale=h_scale, richardson=richardson)
        err = np.abs(analytic[i] - num) / np.maximum(1.0, np.abs(num))
        errs.append(float(err.max()) if err.size else 0.0)
    return GradCheckReport(name, max(errs, default=0.0), errs, tolerance, np.dtype(dtype).name)


# ----------------------------------------------------------------------
# the op suite
# ----------------------------------------------------------------------
def default_cases() -> list[tuple[str, Callable[[np.random.Generator], tuple[Fn, list[np.ndarray]]]]]:
    """(name, factory) pairs; a factory draws one random instance ``(fn, inputs)``."""
    from . import objectives as O

    def wrap(op, shapes, positive=(), kinked=()):
        def factory(rng):
            inputs = [rng.standard_normal(s) for s in shapes]
            for i in positive:
                inputs[i] = np.abs(inputs[i]) + 0.5
            for i in kinked:
                # keep probes clear of the kink at 0
                inputs[i] = np.sign(inputs[i]) * (np.abs(inputs[i]) + 0.1)
            w = {}

            def fn(*xs):
                out = op(*xs)
                if out.size == 1:
                    return out.reshape(())
                if out.shape not in w:
                    w[out.shape] = rng.standard_normal(out.shape)
                return T.tsum(out * T.Tensor(w[out.shape].astype(out.dtype)))

            return fn, inputs

        return factory

    def ce_factory(rng):
        labels = rng.integers(0, 6, size=4)
        return (lambda x: T.cross_entropy_logits(x, labels)), [rng.standard_normal((4, 6)) * 2]

    def emb_factory(rng):
        ids = rng.integers(0, 7, size=(2, 5))
        w = rng.standard_normal((2, 5, 3))
        return (lambda e: T.tsum(T.embedding(e, ids) * T.Tensor(w.astype(e.dtype)))), [rng.standard_normal((7, 3))]

    def getitem_factory(rng):
        w = rng.standard_normal((3, 4))
        idx = (slice(None), 1, slice(None))
        return (lambda x: T.tsum(x[idx] * T.Tensor(w.astype(x.dtype)))), [rng.standard_normal((3, 5, 4))]

    def clip_factory(rng):
        n, d = 4, 6
        labels_free = [rng.standard_normal((n, d)), rng.standard_normal((n, d)), rng.standard_normal(()) * 0.5 + 1.0]
        return (lambda zi, zt, s: O.clip_loss(zi, zt, s)), labels_free

    def simclr_factory(rng):
        n, d = 4, 6
        return (lambda a, b: O.simclr_loss(a, b, temperature=0.5)), [rng.standard_normal((n, d)), rng.standard_normal((n, d))]

    def slip_factory(rng):
        n = 4
        ins = [rng.standard_normal((n, 5)), rng.standard_normal((n, 5)), rng.standard_normal((n, 3)), rng.standard_normal((n, 3)), rng.standard_normal(()) * 0.3 + 1.0]
        cfg = O.SlipLossConfig(ssl_scale=1.0, temperature=0.5)

        def fn(zi, zt, z1, z2, s):
            return O.slip_loss(O.EmbeddingBundle(zi, zt, z1, z2, s), cfg)[0]

        return fn, ins

    def attention_factory(rng):
        from .nn import attention

        mask = np.triu(np.full((3, 3), -1e9), k=1)
        return (
            lambda q, k, v: T.tsum(attention(q, k, v, heads=2, mask=mask) ** 2),
            [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))],
        )

    return [
        ("add", wrap(T.add, [(3, 4), (4,)])),
        ("sub", wrap(T.sub, [(3, 4), (3, 4)])),
        ("mul", wrap(T.mul, [(3, 4), (4,)])),
        ("div", wrap(T.div, [(3, 4), (3, 4)], positive=[1])),
        ("neg", wrap(T.neg, [(5,)])),
        ("power", wrap(lambda x: T.power(x, 1.5), [(5,)], positive=[0])),
        ("exp", wrap(T.exp, [(3, 3)])),
        ("log", wrap(T.log, [(3, 3)], positive=[0])),
        ("relu", wrap(T.relu, [(4, 4)], kinked=[0])),
        ("gelu", wrap(T.gelu, [(4, 4)])),
        ("matmul", wrap(T.matmul, [(3, 4), (4, 2)])),
        ("matmul_batched", wrap(T.matmul, [(2, 3, 4), (2, 4, 3)])),
        ("transpose", wrap(lambda x: T.transpose(x, (1, 0, 2)), [(2, 3, 4)])),
        ("reshape", wrap(lambda x: T.reshape(x, (6, 2)), [(3, 4)])),
        ("broadcast_to", wrap(lambda x: T.broadcast_to(x, (3, 2, 4)), [(2, 4)])),
        ("concat", wrap(lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)])),
        ("getitem", getitem_factory),
        ("embedding", emb_factory),
        ("sum", wrap(lambda x: T.tsum(x, axis=0), [(3, 4)])),
        ("mean", wrap(lambda x: T.mean(x, axis=-1, keepdims=True), [(3, 4)])),
        ("softmax", wrap(T.softmax, [(3, 5)])),
        ("log_softmax", wrap(T.log_softmax, [(3, 5)])),
        ("cross_entropy_logits", ce_factory),
        ("layer_norm", wrap(lambda x, g, b: T.layer_norm(x, g, b), [(3, 6), (6,), (6,)])),
        ("l2_normalize", wrap(T.l2_normalize, [(4, 8)])),
        ("attention", attention_factory),
        ("clip_loss", clip_factory),
        ("simclr_loss", simclr_factory),
        ("slip_loss", slip_factory),
    ]


@dataclass
class SuiteResult:
    reports: list[GradCheckReport] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def worst(self) -> dict[tuple[str, str], float]:
        out: dict[tuple[str, str], float] = {}
        for r in self.reports:
            key = (r.name, r.precision)
            out[key] = max(out.get(key, 0.0), r.max_rel_err)
        return out

    def format(self) -> str:
        lines = [f"{'op':<22} {'float32':>12} {'float64':>12}  status"]
        worst = self.worst()
        names = list(dict.fromkeys(r.name for r in self.reports))
        for name in names:
            e32 = worst.get((name, "float32"), float("nan"))
            e64 = worst.get((name, "float64"), float("nan"))
            ok = all(r.passed for r in self.reports if r.name == name)
            lines.append(f"{name:<22} {e32:12.3e} {e64:12.3e}  {'ok' if ok else 'FAIL'}")
        lines.append(f"{len(names)} ops, {len(self.reports)} checks, {self.seconds:.1f}s: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def run_suite(
    instances: int = 10,
    seed: int = 0,
    tol32: float = 1e-4,
    tol64: float = 1e-6,
    cases=None,
) -> SuiteResult:
    """Grad-check every case on ``instances`` random draws in both precisions."""
    cases = default_cases() if cases is None else cases
    rng = np.random.default_rng(seed)
    result = SuiteResult()
    t0 = time.perf_counter()
    for name, factory in cases:
        for _ in range(instances):
            fn, inputs = factory(rng)
            result.reports.append(grad_check(fn, inputs, tol32, np.float32, name))
            result.reports.append(grad_check(fn, inputs, tol64, np.float64, name))
    result.seconds = time.perf_counter() - t0
    return result
