"""Procedural image-caption corpus: coloured shapes on a noisy background."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ConfigError
from ..rng import derive_rng
from .manifest import Record

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (235, 215, 40),
    "purple": (150, 60, 200),
    "orange": (245, 140, 30),
    "cyan": (40, 210, 220),
    "white": (245, 245, 245),
    "black": (20, 20, 20),
}

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")

# shape diameter as a fraction of the image side
SIZES = {"small": 0.42, "large": 0.6}

# Captions name only the row: the CLIP-branch crop flips horizontally, so
# "left"/"right" would contradict half of the training views.
POSITIONS = {"top": 0.32, "middle": 0.5, "bottom": 0.68}
COLUMNS = (0.32, 0.5, 0.68)

DEFAULT_CAPTION_TEMPLATES = (
    "a {size} {color} {shape} at the {position}.",
    "a photo of a {color} {shape}.",
    "a {color} {shape} on a noisy background.",
    "there is a {size} {color} {shape} near the {position}.",
    "{color} {shape}, {size}, {position}.",
)

DEFAULT_PROMPT_TEMPLATES = (
    "a photo of a {}.",
    "a {} on a noisy background.",
    "a picture of a {}.",
    "a rendering of a {}.",
)


@dataclass
class SynthSpec:
    num_images: int = 64
    shapes: list[str] = field(default_factory=lambda: ["circle", "cross"])
    colors: list[str] = field(default_factory=lambda: ["red", "blue"])
    image_size: int = 32
    caption_templates: list[str] = field(default_factory=lambda: list(DEFAULT_CAPTION_TEMPLATES))
    prompt_templates: list[str] = field(default_factory=lambda: list(DEFAULT_PROMPT_TEMPLATES))
    noise: float = 0.15

    def validate(self) -> None:
        if len(self.shapes) < 2 or len(self.colors) < 2:
            raise ConfigError("synthetic corpus needs at least 2 shapes and 2 colors")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}; available: {SHAPES}")
        for c in self.colors:
            if c not in COLORS:
                raise ConfigError(f"unknown color {c!r}; available: {sorted(COLORS)}")
        if len(set(self.shapes)) != len(self.shapes) or len(set(self.colors)) != len(self.colors):
            raise ConfigError("duplicate shape or color names")
        if self.num_images < len(self.shapes) * len(self.colors):
            raise ConfigError(f"num_images {self.num_images} < number of classes {len(self.shapes) * len(self.colors)}")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if not self.caption_templates:
            raise ConfigError("no caption templates")
        for t in self.caption_templates:
            if "{color}" not in t or "{shape}" not in t:
                raise ConfigError(f"caption template {t!r} must mention {{color}} and {{shape}}")
            try:
                t.format(color="c", shape="s", size="z", position="p")
            except (KeyError, IndexError, ValueError) as exc:
                raise ConfigError(f"bad caption template {t!r}: {exc}") from exc
        for t in self.prompt_templates:
            if t.count("{}") != 1:
                raise ConfigError(f"prompt template {t!r} needs exactly one {{}} slot")

    @property
    def class_names(self) -> list[str]:
        return [f"{c} {s}" for s in self.shapes for c in self.colors]


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.1
    if shape == "cross":
        arm = r * 0.35
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "triangle":
        # apex up, base at cy + r*0.8
        top, base = cy - r, cy + r * 0.8
        half = (yy - top) / (base - top) * r
        return (yy >= top) & (yy <= base) & (np.abs(dx) <= half)
    raise ConfigError(f"unknown shape {shape!r}")


def render(
    shape: str, color: str, size: str, position: str, image_size: int, rng: np.random.Generator, noise: float = 0.15, column: float = 0.5
) -> np.ndarray:
    """One ``S x S x 3`` uint8 image; ``position`` names the row, ``column`` is a fraction of the width."""
    s = image_size
    base = rng.uniform(0.35, 0.65)
    bg = base + noise * rng.standard_normal((s, s, 1)) + 0.3 * noise * rng.standard_normal((s, s, 3))
    img = np.clip(bg, 0, 1) * 255.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    py, px = POSITIONS[position], column
    jitter = rng.uniform(-0.04, 0.04, size=2)
    r = SIZES[size] * s * rng.uniform(0.92, 1.08) / 2
    mask = _shape_mask(shape, yy, xx, (py + jitter[0]) * s, (px + jitter[1]) * s, r)
    rgb = np.asarray(COLORS[color], np.float64) + rng.normal(0, 6, size=3)
    img[mask] = rgb
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def synth_generate(spec: SynthSpec, seed: int = 0, prefix: str = "images") -> tuple[list[Record], dict[str, np.ndarray]]:
    """Render a balanced corpus.

    Labels cycle through the ``shape x color`` classes so every class gets
    ``num_images / K`` images (+-1).  Within a class, size and position are
    dealt from a shuffled deck so that specific captions rarely repeat.

    Returns records (image paths relative to the corpus root) and the
    rendered pixels keyed by those paths.
    """
    spec.validate()
    rng = derive_rng(seed, "synth")
    classes = [(s, c) for s in spec.shapes for c in spec.colors]
    combos = list(itertools.product(SIZES, POSITIONS, COLUMNS))
    decks = {k: [combos[i] for i in rng.permutation(len(combos))] for k in range(len(classes))}

    records, images = [], {}
    order = rng.permutation(spec.num_images)
    for n in range(spec.num_images):
        k = n % len(classes)
        shape, color = classes[k]
        size, position, column = decks[k][(n // len(classes)) % len(combos)]
        path = f"{prefix}/{int(order[n]):05d}.png"
        images[path] = render(shape, color, size, position, spec.image_size, derive_rng(seed, "render", n), spec.noise, column)
        captions = [t.format(color=color, shape=shape, size=size, position=position) for t in spec.caption_templates]
        records.append(Record(image=path, captions=captions, label=f"{color} {shape}"))
    records.sort(key=lambda r: r.image)
    return records, images
