"""Procedural 48-class image/caption corpus and backdoor poisoning.

Each sample shows one shape (circle, square, triangle, cross, ring, bar) in
one of the eight RGB-cube corner colors on a noisy gray background. Pixel
values are stored already quantized to 8 bits so the in-memory corpus and
its PPM export are bit-identical.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import Rng
from .triggers import TriggerSpec, apply_trigger, draw_position

logger = logging.getLogger(__name__)

__all__ = [
    "SHAPES",
    "COLORS",
    "ConceptClass",
    "CLASSES",
    "TEMPLATES",
    "DEFAULT_TARGET",
    "Sample",
    "PoisonConfig",
    "Corpus",
    "class_by_name",
    "render_sample",
    "build_corpus",
    "poison_corpus",
    "poison_count",
    "save_corpus",
    "load_corpus",
    "write_ppm",
    "read_ppm",
]

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar")
COLORS = {
    "black": (0.0, 0.0, 0.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
}

TEMPLATES = (
    "a photo of a {}",
    "an image of a {}",
    "a small {} in the corner",
    "a large {} in the middle",
    "a {} on a gray background",
    "a blurry picture of the {}",
    "a bright {} drawn on a plain canvas",
    "a rendering of one {} seen from above",
)

DEFAULT_TARGET = "yellow bar"


@dataclass(frozen=True)
class ConceptClass:
    shape: str
    color: str

    @property
    def class_name(self) -> str:
        return f"{self.color} {self.shape}"

    @property
    def rgb(self) -> tuple[float, float, float]:
        return COLORS[self.color]


CLASSES = tuple(ConceptClass(s, c) for s in SHAPES for c in COLORS)
_BY_NAME = {c.class_name: i for i, c in enumerate(CLASSES)}


def class_by_name(name: str) -> int:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise KeyError(f"unknown class name {name!r}") from None


@dataclass
class Sample:
    image: np.ndarray
    caption: str
    label: int
    poisoned: bool = False
    trigger_meta: dict | None = None
    split: str = "train"

    @property
    def concept(self) -> ConceptClass:
        return CLASSES[self.label]


@dataclass(frozen=True)
class PoisonConfig:
    rate: float
    trigger: TriggerSpec
    target_label: str = DEFAULT_TARGET
    template_ids: tuple[int, ...] = tuple(range(len(TEMPLATES)))
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"poison rate must lie in [0, 1], got {self.rate}")
        class_by_name(self.target_label)
        if not self.template_ids or any(not 0 <= t < len(TEMPLATES) for t in self.template_ids):
            raise ValueError(f"template_ids must index TEMPLATES, got {self.template_ids}")


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float, vertical: bool) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = ys - cy, xs - cx
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if shape == "triangle":
        depth = (dy + r) / (2.0 * r)
        return (depth >= 0) & (depth <= 1) & (np.abs(dx) <= depth * r)
    if shape == "cross":
        t = r / 3.0
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "bar":
        if vertical:
            dx, dy = dy, dx
        return (np.abs(dx) <= 1.4 * r) & (np.abs(dy) <= 0.35 * r)
    raise ValueError(f"unknown shape {shape!r}")


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_image(concept: ConceptClass, rng: Rng, size: int = 32) -> np.ndarray:
    if size < 16:
        raise ValueError(f"image size must be >= 16, got {size}")
    gen = rng.generator()
    gray = rng.uniform(0.3, 0.7)
    tint = np.array([rng.uniform(-0.05, 0.05) for _ in range(3)])
    img = gray + tint + gen.normal(0.0, 0.02, size=(size, size, 3))
    r = rng.uniform(0.18, 0.3) * size
    vertical = rng.bernoulli(0.5)
    reach = 1.4 * r if concept.shape == "bar" else r
    margin = reach + 1.0
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    mask = _shape_mask(concept.shape, size, cy, cx, r, vertical)
    base = np.asarray(concept.rgb)
    color = base + (0.5 - base) * rng.uniform(0.0, 0.08)
    img[mask] = color
    return _quantize(img)


def render_sample(concept: ConceptClass | int, rng: Rng, size: int = 32) -> Sample:
    label = concept if isinstance(concept, int) else CLASSES.index(concept)
    concept = CLASSES[label]
    image = render_image(concept, rng, size)
    template = TEMPLATES[rng.integers(len(TEMPLATES))]
    return Sample(image=image, caption=template.format(concept.class_name), label=label)


@dataclass
class Corpus:
    samples: list[Sample]
    splits: dict[str, tuple[int, int]] = field(default_factory=dict)
    image_size: int = 32
    seed: int = 0

    def __len__(self):
        return len(self.samples)

    def split(self, name: str) -> list[Sample]:
        lo, hi = self.splits[name]
        return self.samples[lo:hi]

    def indices(self, name: str) -> range:
        lo, hi = self.splits[name]
        return range(lo, hi)


def _labels(n: int, rng: Rng, stratified: bool) -> list[int]:
    k = len(CLASSES)
    if stratified:
        labels = [i % k for i in range(n)]
        return [labels[j] for j in rng.permutation(n)]
    return [rng.integers(k) for _ in range(n)]


def build_corpus(
    n: int | dict[str, int],
    rng: Rng,
    size: int = 32,
    stratified: bool = False,
) -> Corpus:
    """Render a corpus; ``n`` may map split names to sizes (contiguous index ranges).

    Each sample is rendered from its own stream ``rng.split(index)`` so
    rendering order does not matter.
    """
    sizes = {"train": n} if isinstance(n, int) else dict(n)
    if sum(sizes.values()) < 1:
        raise ValueError("corpus needs at least one sample")
    samples: list[Sample] = []
    splits = {}
    base = rng.spawn()
    for name, count in sizes.items():
        lo = len(samples)
        labels = _labels(count, base.split(10_000_000 + lo), stratified)
        for offset, label in enumerate(labels):
            s = render_sample(label, base.split(lo + offset), size)
            s.split = name
            samples.append(s)
        splits[name] = (lo, len(samples))
    return Corpus(samples=samples, splits=splits, image_size=size, seed=rng.seed)


def poison_count(rate: float, n: int) -> int:
    if rate <= 0:
        return 0
    k = int(round(rate * n))  # round-half-to-even
    if k < 1:
        logger.warning("poison rate %g on %d samples rounds to 0; poisoning exactly 1", rate, n)
        k = 1
    return min(k, n)


def poison_corpus(samples: list[Sample], cfg: PoisonConfig) -> tuple[list[Sample], list[int]]:
    """Poison ``round(rate * n)`` uniformly chosen samples.

    Returns the new sample list (unselected samples are the same objects)
    and the sorted indices that were poisoned.
    """
    if not samples:
        raise ValueError("cannot poison an empty corpus")
    rng = Rng(cfg.seed)
    k = poison_count(cfg.rate, len(samples))
    chosen = sorted(rng.sample_without_replacement(len(samples), k))
    out = list(samples)
    for idx in chosen:
        s = samples[idx]
        h, w, _ = s.image.shape
        meta = {"spec_id": cfg.trigger.spec_id, "variant": cfg.trigger.variant.value}
        position = None
        if cfg.trigger.variant.is_badnet:
            position = draw_position(cfg.trigger, h, w, rng)
            meta["position"] = list(position)
        tid = cfg.template_ids[rng.integers(len(cfg.template_ids))]
        meta["template_id"] = tid
        out[idx] = replace(
            s,
            image=_quantize(apply_trigger(s.image, cfg.trigger, position=position)),
            caption=TEMPLATES[tid].format(cfg.target_label),
            poisoned=True,
            trigger_meta=meta,
        )
    return out, chosen


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    h, w, _ = image.shape
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def save_corpus(corpus: Corpus, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.jsonl", "w") as fh:
        for i, s in enumerate(corpus.samples):
            name = f"img_{i:06d}.ppm"
            write_ppm(directory / name, s.image)
            rec = {
                "index": i,
                "file": name,
                "caption": s.caption,
                "class_name": s.concept.class_name,
                "split": s.split,
                "poisoned": s.poisoned,
                "trigger_meta": s.trigger_meta,
            }
            fh.write(json.dumps(rec) + "\n")
    meta = {"splits": corpus.splits, "image_size": corpus.image_size, "seed": corpus.seed}
    (directory / "corpus.json").write_text(json.dumps(meta, indent=2))
    return directory


def load_corpus(directory: str | os.PathLike) -> Corpus:
    directory = Path(directory)
    samples = []
    with open(directory / "manifest.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            samples.append(
                Sample(
                    image=read_ppm(directory / rec["file"]),
                    caption=rec["caption"],
                    label=class_by_name(rec["class_name"]),
                    poisoned=rec["poisoned"],
                    trigger_meta=rec["trigger_meta"],
                    split=rec["split"],
                )
            )
    meta_path = directory / "corpus.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        splits = {k: tuple(v) for k, v in meta["splits"].items()}
        return Corpus(samples, splits, meta["image_size"], meta["seed"])
    splits: dict[str, tuple[int, int]] = {}
    for i, s in enumerate(samples):
        lo, _ = splits.get(s.split, (i, i))
        splits[s.split] = (lo, i + 1)
    return Corpus(samples, splits, samples[0].image.shape[0], 0)
