"""Training step, metrics log, zero-shot monitor and the training loop."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .. import evaluation as ev
from .. import tensor as T
from ..data.batching import Batch, DataPipeline
from ..data.bpe import BpeVocab
from ..encoders import SlipModel
from ..errors import ConfigError, NumericalError
from ..objectives import EmbeddingBundle, SlipLossConfig, slip_loss
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .optim import AdamW
from .schedule import OptimConfig, cosine_lr

logger = logging.getLogger(__name__)

# training mode -> batch composition
BATCH_MODE = {"slip": "slip", "clip": "clip_only", "simclr": "ssl_only", "decoupled": "decoupled"}

METRIC_COLUMNS = ("step", "lr", "total_loss", "clip_loss", "ssl_loss", "logit_scale", "zshot_acc")


def encode_views(model: SlipModel, batch: Batch, with_ssl: bool = True) -> dict[str, T.Tensor]:
    """Projected embeddings for every view in ``batch``.

    Each image view goes through the shared encoder in its own pass, so the
    CLIP branch computes exactly the same values whether or not SSL views
    are present.  ``with_ssl=False`` skips the SSL views entirely.
    """
    out = {}
    if batch.has_clip:
        wi = model.encode_image(batch.images_i)
        wt = model.encode_text(batch.token_ids, batch.eos)
        out["zi"], out["zt"] = model.project_clip(wi, wt)
    if batch.has_ssl and with_ssl:
        w1 = model.encode_image(batch.images_1)
        w2 = model.encode_image(batch.images_2)
        out["z1"], out["z2"] = model.project_ssl(w1, w2)
    return out


def _losses(z: dict, logit_scale: T.Tensor, loss_cfg: SlipLossConfig):
    return slip_loss(EmbeddingBundle(z.get("zi"), z.get("zt"), z.get("z1"), z.get("z2"), logit_scale), loss_cfg)


def _ssl_live(batch: Batch, loss_cfg: SlipLossConfig) -> bool:
    # with c = 0 next to a CLIP branch the SSL views cannot affect anything
    return not (batch.has_clip and loss_cfg.ssl_scale == 0)


def forward_losses(model: SlipModel, batch: Batch, loss_cfg: SlipLossConfig) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """Encode the views of ``batch`` and evaluate the joint objective.

    When ``c = 0`` and a CLIP branch is present the SSL branch is dead: it is
    not computed and ``ssl_part`` is reported as 0.
    """
    return _losses(encode_views(model, batch, _ssl_live(batch, loss_cfg)), model.logit_scale, loss_cfg)


def _check_finite(values: np.ndarray, step) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite loss at step {step}: total={values[0]} clip={values[1]} ssl={values[2]}")


def _accumulate(grads: dict, named, leaf: dict) -> None:
    for name, p in named:
        g = leaf.get(p)
        if g is not None:
            grads[name] = g if name not in grads else grads[name] + g


def _cached_gradients(model: SlipModel, batch: Batch, loss_cfg: SlipLossConfig, parts: int, named):
    """Full-batch gradients computed in ``parts`` encoder passes.

    Contrastive losses couple every example to every other one, so summing
    per-micro-batch losses would shrink the negative set.  Instead the
    embeddings of all micro-batches are computed first, the loss and its
    gradient with respect to the embeddings are taken over the whole batch,
    and each micro-batch is then re-encoded and back-propagated with that
    embedding gradient as the seed.
    """
    micros = batch.split(parts)
    with T.no_grad():
        live = _ssl_live(batch, loss_cfg)
        chunks = [{k: v.data for k, v in encode_views(model, m, live).items()} for m in micros]
    full = {k: T.Tensor(np.concatenate([c[k] for c in chunks]), requires_grad=True) for k in chunks[0]}
    with T.GradTape() as tape:
        total, clip_part, ssl_part = _losses(full, model.logit_scale, loss_cfg)
    values = np.array([total.item(), clip_part.item(), ssl_part.item()])
    leaf = tape.backward(total)
    grads: dict[str, np.ndarray] = {}
    _accumulate(grads, named, leaf)
    seeds = {k: leaf[t] for k, t in full.items()}
    n = len(micros[0])
    for i, micro in enumerate(micros):
        with T.GradTape() as tape:
            z = encode_views(model, micro, live)
            surrogate = None
            for k, emb in z.items():
                term = T.tsum(emb * T.Tensor(seeds[k][i * n : (i + 1) * n]))
                surrogate = term if surrogate is None else surrogate + term
        _accumulate(grads, named, tape.backward(surrogate))
    return grads, values


def train_step(
    model: SlipModel,
    batch: Batch,
    optimizer: AdamW,
    lr: float,
    loss_cfg: SlipLossConfig,
    grad_accum_steps: int = 1,
    step: Optional[int] = None,
) -> dict[str, float]:
    """Forward, backward and one optimizer update.

    With ``grad_accum_steps > 1`` the encoders run on equal micro-batches
    while the loss still sees the whole batch (see ``_cached_gradients``).
    """
    named = list(model.named_parameters())
    if grad_accum_steps > 1:
        grads, values = _cached_gradients(model, batch, loss_cfg, grad_accum_steps, named)
        _check_finite(values, step)
    else:
        with T.GradTape() as tape:
            total, clip_part, ssl_part = forward_losses(model, batch, loss_cfg)
        values = np.array([total.item(), clip_part.item(), ssl_part.item()])
        _check_finite(values, step)
        grads = {}
        _accumulate(grads, named, tape.backward(total))
    optimizer.step(grads, lr)
    return {
        "lr": float(lr),
        "total_loss": float(values[0]),
        "clip_loss": float(values[1]),
        "ssl_loss": float(values[2]),
        "logit_scale": float(model.logit_scale.item()),
    }


# ----------------------------------------------------------------------
# zero-shot monitor
# ----------------------------------------------------------------------
@dataclass
class ZeroShotMonitor:
    """Held-out zero-shot accuracy, evaluated every ``every_n_steps`` and after the last step."""

    images: np.ndarray  # preprocessed eval views
    labels: np.ndarray
    class_names: list[str]
    templates: list[str]
    vocab: BpeVocab
    every_n_steps: int
    history: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) == 0:
            raise ConfigError("zero-shot monitor needs a non-empty labeled eval set")
        if self.every_n_steps < 1:
            raise ConfigError("every_n_steps must be >= 1")

    def due(self, step: int, total_steps: int) -> bool:
        """``step`` counts completed optimizer steps (1-based)."""
        return step % self.every_n_steps == 0 or step == total_steps

    def evaluate(self, model: SlipModel) -> float:
        clf = ev.build_zeroshot_classifier(model, self.class_names, self.templates, self.vocab)
        _, acc = ev.zeroshot_predict(clf, self.images, model, self.labels)
        return acc

    def __call__(self, model: SlipModel, step: int) -> float:
        acc = self.evaluate(model)
        self.history.append((step, acc))
        return acc


def zeroshot_monitor(model, eval_images, eval_labels, class_names, prompt_templates, vocab, every_n_steps) -> ZeroShotMonitor:
    return ZeroShotMonitor(np.asarray(eval_images), np.asarray(eval_labels), list(class_names), list(prompt_templates), vocab, every_n_steps)


# ----------------------------------------------------------------------
# metrics log
# ----------------------------------------------------------------------
def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsLog:
    """Append-only CSV; floats are written with ``repr`` so values round-trip exactly."""

    def __init__(self, path: Union[str, Path], columns: Sequence[str] = METRIC_COLUMNS):
        self.path = Path(path)
        self.columns = tuple(columns)

    def start(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(",".join(self.columns) + "\n", encoding="utf-8")

    def append(self, row: dict) -> None:
        with self.path.open("a", encoding="utf-8", newline="") as fh:
            fh.write(",".join(_fmt(row.get(c)) for c in self.columns) + "\n")

    def truncate(self, keep_below_step: int) -> None:
        """Drop rows with ``step >= keep_below_step`` (used on resume)."""
        if not self.path.exists():
            self.start()
            return
        lines = self.path.read_text(encoding="utf-8").splitlines()
        kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < keep_below_step]
        self.path.write_text("\n".join(kept) + "\n", encoding="utf-8")

    def read(self) -> list[dict[str, str]]:
        with self.path.open(encoding="utf-8") as fh:
            return list(csv.DictReader(fh))


# ----------------------------------------------------------------------
# trainer
# ----------------------------------------------------------------------
class Trainer:
    """Owns a model, its optimizer and the data pipeline for one training run.

    Step ``k`` (0-based) uses the batch ``pipeline.batch(k)`` and the learning
    rate ``cosine_lr(k, total, warmup)``, so a run is fully determined by the
    root seed and can resume from any checkpoint.
    """

    def __init__(
        self,
        model: SlipModel,
        pipeline: DataPipeline,
        optim: OptimConfig,
        loss: SlipLossConfig,
        mode: str,
        run_dir: Optional[Union[str, Path]] = None,
        monitor: Optional[ZeroShotMonitor] = None,
        checkpoint_every: int = 0,
        fingerprint: str = "",
        config: Optional[dict] = None,
    ):
        if mode not in BATCH_MODE:
            raise ConfigError(f"unknown training mode {mode!r}; expected one of {sorted(BATCH_MODE)}")
        if pipeline.mode != BATCH_MODE[mode]:
            raise ConfigError(f"pipeline builds {pipeline.mode!r} batches but mode {mode!r} needs {BATCH_MODE[mode]!r}")
        if pipeline.batch_size != optim.batch_size:
            raise ConfigError("pipeline and optimizer disagree on batch_size")
        self.model = model
        self.pipeline = pipeline
        self.optim_cfg = optim
        self.loss_cfg = loss
        self.mode = mode
        self.monitor = monitor
        self.checkpoint_every = checkpoint_every
        self.fingerprint = fingerprint
        self.config = config or {}
        spe = pipeline.steps_per_epoch
        self.total_steps = optim.total_steps(spe)
        self.warmup_steps = optim.warmup(spe)
        self.optimizer = AdamW(
            list(model.named_parameters()),
            beta1=optim.beta1,
            beta2=optim.beta2,
            eps=optim.eps,
            weight_decay=optim.decay_for(mode),
            clamp_max={"logit_scale": model.cfg.max_logit_scale},
        )
        self.step = 0
        self.history: list[dict] = []
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.metrics = MetricsLog(self.run_dir / "metrics.csv") if self.run_dir is not None else None

    def lr_at(self, step: int) -> float:
        o = self.optim_cfg
        return cosine_lr(step, self.total_steps, self.warmup_steps, o.base_lr, o.min_lr)

    def run(self, until_step: Optional[int] = None) -> list[dict]:
        """Train up to ``until_step`` completed steps (default: the full schedule)."""
        stop = self.total_steps if until_step is None else min(until_step, self.total_steps)
        if self.metrics is not None and self.step == 0 and not self.history:
            self.metrics.start()
        while self.step < stop:
            k = self.step
            batch = self.pipeline.batch(k)
            row = {"step": k}
            row.update(train_step(self.model, batch, self.optimizer, self.lr_at(k), self.loss_cfg, self.optim_cfg.grad_accum_steps, k))
            self.step = k + 1
            row["zshot_acc"] = None
            if self.monitor is not None and self.monitor.due(self.step, self.total_steps):
                row["zshot_acc"] = self.monitor(self.model, self.step)
            self.history.append(row)
            if self.metrics is not None:
                self.metrics.append(row)
            if self.run_dir is not None and self.checkpoint_every and (self.step % self.checkpoint_every == 0 or self.step == self.total_steps):
                self.save(self.run_dir / "checkpoints" / f"step-{self.step:06d}.ckpt")
                self.save(self.run_dir / "checkpoints" / "latest.ckpt")
        return self.history

    # --- checkpointing -------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors = {f"model.{n}": p.data for n, p in self.model.named_parameters()}
        tensors.update({f"optim.{k}": v for k, v in self.optimizer.state_arrays().items()})
        header = {
            "format": "slip-checkpoint",
            "fingerprint": self.fingerprint,
            "step": self.step,
            "optimizer_step": self.optimizer.step_count,
            "mode": self.mode,
            "rng": {"root_seed": self.pipeline.seed, "next_step": self.step},
            "model": self.model.cfg.to_dict(),
            "config": self.config,
        }
        return Checkpoint(header, tensors)

    def save(self, path: Union[str, Path]) -> None:
        write_checkpoint(path, self.checkpoint())

    def resume(self, path: Union[str, Path], allow_mismatch: bool = False) -> None:
        ckpt = read_checkpoint(path, self.fingerprint, allow_mismatch)
        if ckpt.header.get("rng", {}).get("root_seed") != self.pipeline.seed and not allow_mismatch:
            raise ConfigError(f"{path}: checkpoint was written with seed {ckpt.header.get('rng')}, run uses {self.pipeline.seed}")
        # both loads validate before mutating
        optim_state = ckpt.group("optim")
        for key in (f"{kind}.{n}" for n, _ in self.optimizer.params for kind in ("m", "v")):
            if key not in optim_state:
                raise ConfigError(f"{path}: optimizer state lacks {key}")
        self.model.load_state_dict(ckpt.group("model"), strict=True)
        self.optimizer.load_state_arrays(optim_state, ckpt.header["optimizer_step"])
        self.step = ckpt.step
        self.history = [r for r in self.history if r["step"] < self.step]
        if self.metrics is not None:
            self.metrics.truncate(self.step)
        logger.info("resumed from %s at step %d", path, self.step)


def load_pretrained(model: SlipModel, path: Union[str, Path], prefix: str = "image_encoder.") -> dict[str, list[str]]:
    """Initialize the parameters under ``prefix`` from a checkpoint; others stay fresh.

    Returns the ``loaded`` / ``missing`` / ``unexpected`` report from
    :meth:`Module.load_state_dict`.
    """
    ckpt = read_checkpoint(path)
    state = {k: v for k, v in ckpt.group("model").items() if k.startswith(prefix)}
    report = model.load_state_dict(state, strict=False, prefix=prefix)
    fresh = [n for n, _ in model.named_parameters() if n not in report["loaded"]]
    report["fresh"] = fresh
    return report
