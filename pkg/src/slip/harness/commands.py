"""The four workflows: gen-data, pretrain, evaluate, gradcheck."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from .. import __version__
from .. import evaluation as ev
from ..data.augment import AugmentConfig, eval_view
from ..data.batching import DataPipeline
from ..data.bpe import BpeVocab, bpe_train
from ..data.manifest import CorpusManifest, read_lines, read_manifest, save_image, write_manifest
from ..data.synth import DEFAULT_CAPTION_TEMPLATES, DEFAULT_PROMPT_TEMPLATES, SynthSpec, synth_generate
from ..encoders import ModelConfig, SlipModel
from ..errors import ConfigError, DataError
from ..gradcheck import run_suite
from ..rng import derive_rng
from ..train.checkpoint import read_checkpoint
from ..train.loop import BATCH_MODE, MetricsLog, Trainer, ZeroShotMonitor, load_pretrained
from .config import ExperimentConfig, dump_config

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# gen-data
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class GenDataSpec:
    num_images: int = 1024
    eval_images: int = 256
    shapes: tuple = ("circle", "cross")
    colors: tuple = ("red", "blue")
    image_size: int = 32
    noise: float = 0.15
    caption_templates: tuple = DEFAULT_CAPTION_TEMPLATES
    prompt_templates: tuple = DEFAULT_PROMPT_TEMPLATES
    image_format: str = "png"
    seed: int = 0

    def synth(self, n: int) -> SynthSpec:
        return SynthSpec(n, list(self.shapes), list(self.colors), self.image_size, list(self.caption_templates), list(self.prompt_templates), self.noise)


def load_gen_spec(path: Union[str, Path]) -> GenDataSpec:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read data spec {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name for f in fields(GenDataSpec)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"{path}: {k}: unknown key (allowed: {', '.join(sorted(known))})")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    spec = GenDataSpec(**kw)
    if spec.image_format not in ("png", "ppm"):
        raise ConfigError(f"{path}: image_format must be png or ppm")
    return spec


def cmd_gen_data(spec: GenDataSpec, out_dir: Union[str, Path], seed: Optional[int] = None) -> dict:
    """Render train and held-out corpora plus class-name and prompt-template files."""
    out = Path(out_dir)
    seed = spec.seed if seed is None else seed
    ext = spec.image_format
    written = {}
    for split, n, sub_seed in (("train", spec.num_images, 0), ("eval", spec.eval_images, 1)):
        if n == 0:
            continue
        synth = spec.synth(n)
        records, images = synth_generate(synth, seed=seed * 2 + sub_seed, prefix=f"images/{split}")
        for r in records:
            new = str(Path(r.image).with_suffix("." + ext))
            save_image(out / new, images[r.image])
            r.image = new
        name = "manifest.jsonl" if split == "train" else "eval.jsonl"
        write_manifest(out / name, records)
        written[split] = len(records)
    spec0 = spec.synth(max(spec.num_images, len(spec.shapes) * len(spec.colors)))
    (out / "classes.txt").write_text("".join(c + "\n" for c in spec0.class_names), encoding="utf-8")
    (out / "templates.txt").write_text("".join(t + "\n" for t in spec.prompt_templates), encoding="utf-8")
    return written


# ----------------------------------------------------------------------
# shared loading helpers
# ----------------------------------------------------------------------
def _resolve(base: Path, p: Optional[str]) -> Optional[Path]:
    if p is None:
        return None
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_vocab(cfg: ExperimentConfig, manifest: CorpusManifest, run_dir: Path, base: Path) -> BpeVocab:
    path = _resolve(base, cfg.data.vocab)
    if path is not None:
        return BpeVocab.load(path)
    saved = run_dir / "vocab.bpe"
    if saved.exists():
        return BpeVocab.load(saved)
    vocab = bpe_train([c for r in manifest.records for c in r.captions], cfg.data.vocab_size)
    run_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(saved)
    return vocab


def labeled_views(manifest: CorpusManifest, class_names: list[str], aug: AugmentConfig) -> tuple[np.ndarray, np.ndarray]:
    index = {c: i for i, c in enumerate(class_names)}
    missing = sorted({r.label for r in manifest.records if r.label not in index})
    if missing:
        raise DataError(f"labels {missing} are not in the class-name list")
    x = np.stack([eval_view(manifest.image(r), aug) for r in manifest.records])
    y = np.array([index[r.label] for r in manifest.records], dtype=np.int64)
    return x, y


def _eval_inputs(cfg: ExperimentConfig, base: Path):
    e = cfg.eval
    if not (e.manifest and e.class_names and e.templates):
        raise ConfigError("eval.manifest, eval.class_names and eval.templates are required for zero-shot evaluation")
    return read_manifest(_resolve(base, e.manifest)), read_lines(_resolve(base, e.class_names)), read_lines(_resolve(base, e.templates))


# ----------------------------------------------------------------------
# pretrain
# ----------------------------------------------------------------------
def _build_trainer(cfg: ExperimentConfig, mode: str, run_dir: Path, base: Path, model: Optional[SlipModel] = None) -> Trainer:
    manifest = read_manifest(_resolve(base, cfg.data.manifest))
    vocab = load_vocab(cfg, manifest, run_dir, base)
    mcfg = cfg.model.resolve(vocab_size=len(vocab))
    aug = AugmentConfig(image_size=mcfg.vision.image_size, clip_augment=cfg.data.clip_augment)
    ssl_manifest = read_manifest(_resolve(base, cfg.data.ssl_manifest)) if mode == "decoupled" else None
    pipeline = DataPipeline(
        manifest, vocab, cfg.optim.batch_size, cfg.seed, BATCH_MODE[mode], aug, mcfg.text.context_length, ssl_manifest
    )
    if model is None:
        model = SlipModel(mcfg, rng=derive_rng(cfg.seed, "init"))
    monitor = None
    if cfg.eval.monitor_every and mode != "simclr":
        eman, names, templates = _eval_inputs(cfg, base)
        x, y = labeled_views(eman, names, aug)
        monitor = ZeroShotMonitor(x, y, names, templates, vocab, cfg.eval.monitor_every)
    return Trainer(
        model,
        pipeline,
        cfg.optim,
        cfg.loss,
        mode,
        run_dir=run_dir,
        monitor=monitor,
        checkpoint_every=cfg.checkpoint_every,
        fingerprint=cfg.fingerprint(),
        config=cfg.to_dict(),
    )


def cmd_pretrain(cfg: ExperimentConfig, base: Union[str, Path] = ".", resume: Optional[Union[str, Path]] = None, until_step: Optional[int] = None) -> Path:
    """Run the configured mode; returns the run directory.

    ``ssl_then_clip`` trains SimCLR-only in ``phase1/`` and then CLIP in
    ``phase2/`` with the image encoder initialized from phase 1.
    """
    base = Path(base)
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.yaml")
    stamp = {"version": __version__, "seed": cfg.seed, "mode": cfg.mode, "fingerprint": cfg.fingerprint()}
    (run_dir / "run.json").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if cfg.mode != "ssl_then_clip":
        trainer = _build_trainer(cfg, cfg.mode, run_dir, base)
        if resume is not None:
            trainer.resume(resume)
        trainer.run(until_step)
        return run_dir

    in_phase2 = resume is not None and "phase2" in Path(resume).parts
    if not in_phase2:
        p1 = _build_trainer(cfg, "simclr", run_dir / "phase1", base)
        if resume is not None:
            p1.resume(resume)
        p1.run()
        p1.save(run_dir / "phase1" / "checkpoints" / "latest.ckpt")
    (run_dir / "phase2").mkdir(parents=True, exist_ok=True)
    # phase 2 reuses the phase-1 vocabulary
    if (run_dir / "phase1" / "vocab.bpe").exists():
        (run_dir / "phase2" / "vocab.bpe").write_bytes((run_dir / "phase1" / "vocab.bpe").read_bytes())
    p2 = _build_trainer(cfg, "clip", run_dir / "phase2", base)
    if in_phase2:
        p2.resume(resume)
    else:
        report = load_pretrained(p2.model, run_dir / "phase1" / "checkpoints" / "latest.ckpt", prefix="image_encoder.")
        logger.info("phase 2: %d tensors from phase 1, %d fresh", len(report["loaded"]), len(report["fresh"]))
    p2.run(until_step)
    return run_dir


# ----------------------------------------------------------------------
# evaluate
# ----------------------------------------------------------------------
def model_from_checkpoint(path: Union[str, Path]) -> tuple[SlipModel, dict]:
    ckpt = read_checkpoint(path)
    mcfg = ModelConfig.from_dict(ckpt.header["model"])
    model = SlipModel(mcfg, seed=0)
    model.load_state_dict(ckpt.group("model"), strict=True)
    return model, ckpt.header


def cmd_evaluate(checkpoint: Union[str, Path], cfg: ExperimentConfig, base: Union[str, Path] = ".", out: Optional[Union[str, Path]] = None) -> dict:
    """Zero-shot, linear-probe and finetune accuracy of a checkpoint (as configured)."""
    base = Path(base)
    checkpoint = Path(checkpoint)
    model, header = model_from_checkpoint(checkpoint)
    run_dir = checkpoint.parent.parent if checkpoint.parent.name == "checkpoints" else checkpoint.parent
    out_dir = Path(out) if out is not None else run_dir
    aug = AugmentConfig(image_size=model.cfg.vision.image_size)
    eman, names, templates = _eval_inputs(cfg, base)
    x_test, y_test = labeled_views(eman, names, aug)
    summary: dict = {"checkpoint": str(checkpoint), "step": header.get("step"), "num_test": int(len(y_test)), "num_classes": len(names)}

    if "zeroshot" in cfg.eval.settings:
        manifest = read_manifest(_resolve(base, cfg.data.manifest))
        vocab = load_vocab(cfg, manifest, run_dir, base)
        clf = ev.build_zeroshot_classifier(model, names, templates, vocab)
        _, summary["zeroshot_acc"] = ev.zeroshot_predict(clf, x_test, model, y_test)
    if "probe" in cfg.eval.settings or "finetune" in cfg.eval.settings:
        train = read_manifest(_resolve(base, cfg.data.manifest))
        x_train, y_train = labeled_views(train, names, aug)
        if "probe" in cfg.eval.settings:
            p = cfg.eval.probe
            pcfg = ev.ProbeConfig(lr=p.lr, momentum=p.momentum, epochs=p.epochs, batch_size=p.batch_size, seed=cfg.seed, standardize=p.standardize)
            summary["probe_acc"] = ev.linear_probe(ev.extract_features(model, x_train), y_train, ev.extract_features(model, x_test), y_test, pcfg)
        if "finetune" in cfg.eval.settings:
            f = cfg.eval.finetune
            fcfg = ev.FinetuneConfig(
                epochs=f.epochs, base_lr=f.base_lr, layer_decay=f.layer_decay, weight_decay=f.weight_decay,
                batch_size=f.batch_size, warmup_epochs=f.warmup_epochs, seed=cfg.seed,
            )
            summary["finetune_acc"] = ev.finetune(
                model, [train.image(r) for r in train.records], y_train, [eman.image(r) for r in eman.records], y_test, fcfg, aug
            )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log = MetricsLog(out_dir / "eval_metrics.csv", ("step", "zeroshot_acc", "probe_acc", "finetune_acc"))
    if not log.path.exists():
        log.start()
    log.append(summary)
    return summary


# ----------------------------------------------------------------------
# gradcheck
# ----------------------------------------------------------------------
def cmd_gradcheck(instances: int = 10, seed: int = 0):
    return run_suite(instances=instances, seed=seed)
