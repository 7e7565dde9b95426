"""Corpus manifests (JSON lines) and image files."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image

from ..errors import DataError
from .text import clean_caption

logger = logging.getLogger(__name__)


@dataclass
class Record:
    image: str
    captions: list[str]
    label: Optional[str] = None

    def to_json(self) -> str:
        d = {"image": self.image, "captions": self.captions}
        if self.label is not None:
            d["label"] = self.label
        return json.dumps(d, ensure_ascii=False, sort_keys=True)


@dataclass
class CorpusManifest:
    """Records plus the directory their image paths are relative to."""

    records: list[Record]
    root: Path = Path(".")
    dropped: int = 0
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Record:
        return self.records[i]

    def image(self, record: Record) -> np.ndarray:
        """Pixels for ``record`` (cached after the first read)."""
        img = self._cache.get(record.image)
        if img is None:
            img = load_image(self.root / record.image)
            self._cache[record.image] = img
        return img

    def preload(self, images: dict[str, np.ndarray]) -> None:
        self._cache.update(images)

    @property
    def labels(self) -> list[str]:
        return sorted({r.label for r in self.records if r.label is not None})


def clean_records(records: Iterable[Record]) -> tuple[list[Record], int]:
    """Clean captions and drop records left with none."""
    kept, dropped = [], 0
    for r in records:
        caps = [c for c in (clean_caption(x) for x in r.captions) if c]
        if not caps:
            dropped += 1
            continue
        kept.append(Record(r.image, caps, r.label))
    return kept, dropped


def read_manifest(path: Union[str, Path]) -> CorpusManifest:
    """Parse a JSON-lines manifest; captions are cleaned on load."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} does not exist")
    raw = []
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                caps = d["captions"]
                if isinstance(caps, str) or not isinstance(caps, list):
                    raise TypeError("captions must be a list of strings")
                raw.append(Record(str(d["image"]), [str(c) for c in caps], d.get("label")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{n}: bad manifest record ({exc})") from exc
    records, dropped = clean_records(raw)
    if dropped:
        logger.warning("%s: dropped %d record(s) whose captions were empty after cleaning", path, dropped)
    if not records:
        raise DataError(f"{path}: no usable records")
    return CorpusManifest(records, path.parent, dropped)


def write_manifest(path: Union[str, Path], records: Sequence[Record]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Read PNG or binary PPM (P6) as ``H x W x 3`` uint8."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def save_image(path: Union[str, Path], pixels: np.ndarray) -> None:
    """Write uint8 pixels; ``.ppm`` gives the uncompressed raster, anything else PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(pixels, dtype=np.uint8)
    if path.suffix.lower() == ".ppm":
        h, w = arr.shape[:2]
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())
    else:
        Image.fromarray(arr, "RGB").save(path, format="PNG", optimize=False)


def read_lines(path: Union[str, Path]) -> list[str]:
    """Non-empty lines of a plain-text list file (class names, prompt templates)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return [ln for ln in text.splitlines() if ln.strip()]
