#!/usr/bin/env python3
"""
Synthetic Planted-Concept Corpus

Generates small image datasets with planted shapes (square, disc, triangle,
stripes) on a low-amplitude noise background. Each planted shape is a concept
with an exact binary mask, so activated regions can be scored by IoU against
true ground truth. An optional per-concept group bias assigns every image to
group "A" or "B" for the bias audit.

Also writes a surrogate word-embedding table for the corpus vocabulary when
no pretrained table is available: concept vectors share shape and colour
directions, attribute and generic words sit among the concepts they describe,
distractor words are random.

Dependencies: numpy, Pillow
"""

import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from utils.errors import FilterLexError, ConfigError
from utils.reference_data import DatasetManifest, load_manifest, write_manifest
from utils.embedding_store import write_embeddings_text

logger = logging.getLogger(__name__)

SHAPES = ('square', 'disc', 'triangle', 'stripes')
PLACEMENT_RETRIES = 50
PLACEMENT_ATTEMPTS = 400
PLACEMENT_RESTARTS_PER_SHRINK = 40
STRIPE_PERIOD = 4

# Attribute and generic words for the surrogate embedding table
SHAPE_WORDS = {
    'square': ('square', 'box', 'block', 'cube', 'tile'),
    'disc': ('disc', 'round', 'circle', 'ring', 'dot'),
    'triangle': ('triangle', 'wedge', 'peak', 'pyramid', 'cone'),
    'stripes': ('stripes', 'striped', 'lines', 'bands', 'stripe'),
}
GENERIC_WORDS = ('object', 'thing', 'item', 'figure', 'form')

# Filler vocabulary for the surrogate embedding table
DISTRACTOR_WORDS = (
    'table', 'chair', 'river', 'mountain', 'cloud', 'street', 'garden', 'bottle',
    'paper', 'music', 'horse', 'train', 'bridge', 'forest', 'pencil', 'clock',
    'winter', 'summer', 'kitchen', 'doctor', 'market', 'letter', 'camera', 'coffee',
    'island', 'engine', 'pocket', 'silver', 'thunder', 'valley', 'candle', 'ladder',
    'basket', 'mirror', 'tunnel', 'desert', 'jacket', 'planet', 'rabbit', 'violin',
)


@dataclass(frozen=True)
class ConceptSpec:
    name: str
    shape: str
    color: Tuple[float, float, float]


@dataclass
class SynthSpec:
    n_images: int
    image_size: Tuple[int, int]
    concepts: List[ConceptSpec]
    max_concepts_per_image: int = 2
    group_bias: Optional[Dict[str, float]] = None
    seed: int = 0
    min_shape_size: int = 14
    max_shape_size: int = 22
    noise_amplitude: float = 0.1

    def validate(self) -> None:
        if self.n_images < 1:
            raise ConfigError("n_images must be at least 1")
        if not self.concepts:
            raise ConfigError("synthetic spec needs at least one concept")
        names = [c.name for c in self.concepts]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate concept names in spec: {names}")
        for c in self.concepts:
            if c.shape not in SHAPES:
                raise ConfigError(f"concept '{c.name}' has unknown shape '{c.shape}' (use one of {SHAPES})")
        if not 1 <= self.max_concepts_per_image <= len(self.concepts):
            raise ConfigError("max_concepts_per_image must be between 1 and the number of concepts")
        if not 1 <= self.min_shape_size <= self.max_shape_size:
            raise ConfigError("shape size range is empty")
        if self.max_shape_size > min(self.image_size):
            raise ConfigError("max_shape_size exceeds the image size")
        for name, prob in (self.group_bias or {}).items():
            if name not in names:
                raise ConfigError(f"group_bias names unknown concept '{name}'")
            if not 0.0 <= prob <= 1.0:
                raise ConfigError(f"group_bias for '{name}' must be in [0, 1], got {prob}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['image_size'] = list(self.image_size)
        data['concepts'] = [{'name': c.name, 'shape': c.shape, 'color': list(c.color)} for c in self.concepts]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'SynthSpec':
        concepts = [ConceptSpec(c['name'].lower(), c['shape'], tuple(float(v) for v in c['color']))
                    for c in data['concepts']]
        spec = cls(
            n_images=int(data['n_images']),
            image_size=tuple(int(v) for v in data.get('image_size', (64, 64))),
            concepts=concepts,
            max_concepts_per_image=int(data.get('max_concepts_per_image', 2)),
            group_bias=({k.lower(): float(v) for k, v in data['group_bias'].items()}
                        if data.get('group_bias') else None),
            seed=int(data.get('seed', 0)),
            min_shape_size=int(data.get('min_shape_size', 14)),
            max_shape_size=int(data.get('max_shape_size', 22)),
            noise_amplitude=float(data.get('noise_amplitude', 0.1)),
        )
        spec.validate()
        return spec


RED = (0.85, 0.15, 0.1)
BLUE = (0.1, 0.3, 0.9)
COLOR_WORDS = {
    RED: ('red', 'crimson', 'scarlet', 'ruby', 'vermilion'),
    BLUE: ('blue', 'navy', 'azure', 'cobalt', 'indigo'),
}


def default_spec(n_images: int = 2000, seed: int = 0) -> SynthSpec:
    """Eight concepts: four shapes in two colours"""
    concepts = [
        ConceptSpec('brick', 'square', RED), ConceptSpec('window', 'square', BLUE),
        ConceptSpec('apple', 'disc', RED), ConceptSpec('ball', 'disc', BLUE),
        ConceptSpec('roof', 'triangle', RED), ConceptSpec('sail', 'triangle', BLUE),
        ConceptSpec('flag', 'stripes', RED), ConceptSpec('wave', 'stripes', BLUE),
    ]
    return SynthSpec(n_images=n_images, image_size=(64, 64), concepts=concepts,
                     max_concepts_per_image=2, seed=seed)


def bias_spec(n_images: int = 2000, seed: int = 0) -> SynthSpec:
    """Five concepts with planted group-A probabilities 0.9, 0.7, 0.5, 0.3, 0.1"""
    concepts = [
        ConceptSpec('apple', 'disc', RED), ConceptSpec('window', 'square', BLUE),
        ConceptSpec('roof', 'triangle', RED), ConceptSpec('wave', 'stripes', BLUE),
        ConceptSpec('ball', 'disc', BLUE),
    ]
    bias = {'apple': 0.9, 'window': 0.7, 'roof': 0.5, 'wave': 0.3, 'ball': 0.1}
    return SynthSpec(n_images=n_images, image_size=(64, 64), concepts=concepts,
                     max_concepts_per_image=1, group_bias=bias, seed=seed)


def load_synth_spec(path: Union[str, Path]) -> SynthSpec:
    with open(path, 'r', encoding='utf-8') as f:
        return SynthSpec.from_dict(json.load(f))


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Binary size x size footprint of a shape"""
    if shape == 'square' or shape == 'stripes':
        return np.ones((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == 'disc':
        c = (size - 1) / 2.0
        return (((yy - c) ** 2 + (xx - c) ** 2) <= (size / 2.0) ** 2).astype(np.uint8)
    if shape == 'triangle':
        half = (yy + 1) * (size / 2.0) / size
        return (np.abs(xx - (size - 1) / 2.0) <= half).astype(np.uint8)
    raise FilterLexError(f"unknown shape '{shape}'")


def _paint(image: np.ndarray, concept: ConceptSpec, mask: np.ndarray, top: int, left: int,
           rng: np.random.Generator) -> None:
    size = mask.shape[0]
    color = np.asarray(concept.color, dtype=np.float32)[:, None, None]
    patch = np.broadcast_to(color, (3, size, size)).copy()
    if concept.shape == 'stripes':
        rows = (np.arange(size) // (STRIPE_PERIOD // 2)) % 2 == 1
        patch[:, rows, :] *= 0.25
    patch += rng.uniform(-0.05, 0.05, size=patch.shape).astype(np.float32)
    region = image[:, top:top + size, left:left + size]
    region[:, mask == 1] = patch[:, mask == 1]


def _try_place(rng: np.random.Generator, sizes: Sequence[int],
               image_size: Tuple[int, int]) -> Optional[List[Tuple[int, int, int]]]:
    h, w = image_size
    boxes: List[Tuple[int, int, int]] = []
    for size in sizes:
        for _ in range(PLACEMENT_RETRIES):
            top = int(rng.integers(0, h - size + 1))
            left = int(rng.integers(0, w - size + 1))
            # one pixel of clearance keeps masks disjoint
            if all(top + size + 1 <= t or t + s + 1 <= top or left + size + 1 <= l or l + s + 1 <= left
                   for t, l, s in boxes):
                boxes.append((top, left, size))
                break
        else:
            return None
    return boxes


def _place(rng: np.random.Generator, sizes: Sequence[int], image_size: Tuple[int, int],
           image_index: int, min_size: int = 1) -> List[Tuple[int, int, int]]:
    """
    Non-overlapping (top, left, size) boxes for one image

    A failed shape restarts the whole image, since an early shape placed in the
    middle can leave no room for the rest. Every PLACEMENT_RESTARTS_PER_SHRINK
    restarts all sizes shrink by one pixel, never below min_size.
    """
    sizes = list(sizes)
    for attempt in range(1, PLACEMENT_ATTEMPTS + 1):
        boxes = _try_place(rng, sizes, image_size)
        if boxes is not None:
            return boxes
        if attempt % PLACEMENT_RESTARTS_PER_SHRINK == 0:
            sizes = [max(min_size, s - 1) for s in sizes]
    raise FilterLexError(
        f"could not place {len(sizes)} non-overlapping shapes in image {image_index}; "
        f"use smaller shapes or fewer concepts per image")


def _sample_group(rng: np.random.Generator, present: Sequence[str], group_bias: Dict[str, float]) -> str:
    prob_a = float(np.mean([group_bias.get(c, 0.5) for c in present]))
    return 'A' if rng.random() < prob_a else 'B'


def generate(spec: SynthSpec, out_dir: Union[str, Path]) -> DatasetManifest:
    """
    Write images, masks and a manifest for a planted-concept corpus

    Args:
        spec: Corpus description
        out_dir: Directory receiving images/, masks/ and manifest.jsonl

    Returns:
        The loaded manifest
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / 'images').mkdir(parents=True, exist_ok=True)
    (out_dir / 'masks').mkdir(parents=True, exist_ok=True)

    h, w = spec.image_size
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_images)
    records = []
    for index, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        image_id = f"{index:06d}"
        count = int(rng.integers(1, spec.max_concepts_per_image + 1))
        chosen = [spec.concepts[i] for i in rng.choice(len(spec.concepts), size=count, replace=False)]
        sizes = [int(rng.integers(spec.min_shape_size, spec.max_shape_size + 1)) for _ in chosen]
        boxes = _place(rng, sizes, (h, w), index, spec.min_shape_size)

        image = rng.uniform(0.0, spec.noise_amplitude, size=(3, h, w)).astype(np.float32)
        annotations = []
        for j, (concept, (top, left, size)) in enumerate(zip(chosen, boxes)):
            footprint = shape_mask(concept.shape, size)
            _paint(image, concept, footprint, top, left, rng)
            full = np.zeros((h, w), dtype=np.uint8)
            full[top:top + size, left:left + size] = footprint
            mask_rel = f"masks/{image_id}_{j}.png"
            Image.fromarray(full * 255).save(out_dir / mask_rel)
            annotations.append({'concept': concept.name, 'mask': {'kind': 'png', 'path': mask_rel}})

        pixels = (np.clip(image, 0.0, 1.0).transpose(1, 2, 0) * 255).round().astype(np.uint8)
        image_rel = f"images/{image_id}.png"
        Image.fromarray(pixels).save(out_dir / image_rel)

        record = {'id': image_id, 'image': image_rel, 'height': h, 'width': w, 'annotations': annotations}
        if spec.group_bias:
            record['group'] = _sample_group(rng, [c.name for c in chosen], spec.group_bias)
        records.append(record)

    manifest_path = write_manifest(records, out_dir / 'manifest.jsonl')
    with open(out_dir / 'synth_spec.json', 'w', encoding='utf-8') as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
    logger.info(f"Generated {spec.n_images} images with {len(spec.concepts)} concepts in {out_dir}")
    return load_manifest(manifest_path)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def surrogate_vectors(spec: SynthSpec, distractors: Sequence[str] = DISTRACTOR_WORDS,
                      dim: int = 50, seed: int = 0, noise: float = 1.0,
                      word_spread: float = 0.4) -> Tuple[List[str], np.ndarray]:
    """
    Build attribute-structured vectors for the corpus vocabulary

    A concept vector is shape direction + colour direction + its own direction
    (weighted by noise), so two concepts sharing a shape or colour are similar
    but only the full conjunction lands on the concept itself. Attribute words
    (SHAPE_WORDS, COLOR_WORDS) sit at the mean of the concepts carrying the
    attribute and GENERIC_WORDS at the mean of all concepts, each scattered by
    word_spread. An explanation that only knows the colour of a region therefore
    lands among colour words rather than on a concept name.
    """
    rng = np.random.default_rng(seed)
    colors = sorted({c.color for c in spec.concepts})
    shape_dirs = {s: rng.standard_normal(dim) for s in SHAPES}
    color_dirs = {c: rng.standard_normal(dim) for c in colors}

    tokens: List[str] = []
    rows: List[np.ndarray] = []
    concept_rows: Dict[str, np.ndarray] = {}
    for concept in spec.concepts:
        vector = _unit(shape_dirs[concept.shape] + color_dirs[concept.color] + noise * rng.standard_normal(dim))
        concept_rows[concept.name] = vector
        tokens.append(concept.name)
        rows.append(vector)

    def scatter(words: Sequence[str], center: np.ndarray) -> None:
        center = _unit(center)
        for word in words:
            offset = word_spread * rng.standard_normal(dim) / np.sqrt(dim)
            if word not in tokens:
                tokens.append(word)
                rows.append(center + offset)

    for shape in SHAPES:
        members = [concept_rows[c.name] for c in spec.concepts if c.shape == shape]
        scatter(SHAPE_WORDS[shape], np.mean(members, axis=0) if members else shape_dirs[shape])
    for color in colors:
        if color in COLOR_WORDS:
            members = [concept_rows[c.name] for c in spec.concepts if c.color == color]
            scatter(COLOR_WORDS[color], np.mean(members, axis=0))
    scatter(GENERIC_WORDS, np.mean(list(concept_rows.values()), axis=0))

    for word in distractors:
        if word not in tokens:
            tokens.append(word)
            rows.append(rng.standard_normal(dim))
    vectors = np.vstack(rows)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return tokens, vectors


def write_surrogate_embeddings(spec: SynthSpec, path: Union[str, Path], distractors: Sequence[str] = DISTRACTOR_WORDS,
                               dim: int = 50, seed: int = 0) -> Path:
    """Write surrogate_vectors as a GloVe-layout text file"""
    tokens, vectors = surrogate_vectors(spec, distractors, dim, seed)
    path = write_embeddings_text(tokens, vectors, path)
    logger.info(f"Wrote surrogate embeddings for {len(tokens)} words to {path}")
    return path
