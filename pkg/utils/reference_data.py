#!/usr/bin/env python3
"""
Reference Dataset

Reads the JSON-lines manifest that describes the annotated reference dataset
(image path + list of concept annotations) and materializes images and masks.

Each manifest line looks like:

    {"image": "images/000001.png", "id": "000001", "group": "A",
     "annotations": [{"concept": "disc", "mask": {"kind": "png", "path": "masks/000001_0.png"}},
                     {"concept": "square", "mask": {"kind": "bbox", "box": [0, 0, 32, 32]}},
                     {"concept": "scene", "mask": {"kind": "full"}}]}

Masks are only read when asked for; bbox coordinates are checked when the
manifest is loaded.
"""

import json
import random
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from utils.errors import ManifestError, ArtifactNotFoundError, FilterLexError

logger = logging.getLogger(__name__)

MASK_KINDS = ('full', 'bbox', 'png')
SOURCE_KINDS = {'full': 'full', 'bbox': 'bbox', 'png': 'segmentation'}
MIN_IMAGE_SIDE = 8


@dataclass(frozen=True)
class ConceptMask:
    """One (concept, mask) annotation; the binary mask is built on demand"""
    concept: str
    record: Dict[str, Any] = field(compare=False)
    image_size: Tuple[int, int] = (0, 0)
    base_dir: Path = field(default=Path('.'), compare=False)

    @property
    def source_kind(self) -> str:
        return SOURCE_KINDS[self.record['kind']]

    @property
    def mask(self) -> np.ndarray:
        h, w = self.image_size
        kind = self.record['kind']
        if kind == 'full':
            return np.ones((h, w), dtype=np.uint8)
        if kind == 'bbox':
            x0, y0, x1, y1 = (int(v) for v in self.record['box'])
            out = np.zeros((h, w), dtype=np.uint8)
            out[y0:y1, x0:x1] = 1
            return out
        mask_path = self.base_dir / self.record['path']
        if not mask_path.exists():
            raise ArtifactNotFoundError(mask_path, "mask image")
        with Image.open(mask_path) as img:
            arr = np.asarray(img)
        if arr.ndim == 3:
            arr = arr.max(axis=2)
        if arr.shape != (h, w):
            raise ManifestError(f"mask {mask_path} has shape {arr.shape}, expected {(h, w)}")
        return (arr != 0).astype(np.uint8)


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image_path: Path
    size: Tuple[int, int]
    annotations: Tuple[ConceptMask, ...]
    group: Optional[str] = None

    @property
    def concepts(self) -> List[str]:
        return [a.concept for a in self.annotations]


@dataclass
class AnnotatedImage:
    """Image (3 x h x w, values in [0, 1]) with its concept masks"""
    id: str
    image: np.ndarray
    annotations: List[ConceptMask]


@dataclass(frozen=True)
class DatasetManifest:
    entries: Tuple[ManifestEntry, ...]
    concepts: Tuple[str, ...]
    train_concepts: Optional[Tuple[str, ...]] = None
    heldout_concepts: Optional[Tuple[str, ...]] = None
    source: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> List[str]:
        return [e.image_id for e in self.entries]

    def entry(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise ManifestError("no such image", image_id)

    def with_split(self, train: Sequence[str], heldout: Sequence[str]) -> 'DatasetManifest':
        train_set, heldout_set = set(train), set(heldout)
        if train_set & heldout_set:
            raise ManifestError(f"train and heldout concepts overlap: {sorted(train_set & heldout_set)}")
        unknown = (train_set | heldout_set) - set(self.concepts)
        if unknown:
            raise ManifestError(f"split names concepts not in the manifest: {sorted(unknown)}")
        return DatasetManifest(self.entries, self.concepts, tuple(sorted(train_set)),
                               tuple(sorted(heldout_set)), self.source)

    def subset(self, image_ids: Sequence[str]) -> 'DatasetManifest':
        wanted = set(image_ids)
        entries = tuple(e for e in self.entries if e.image_id in wanted)
        return DatasetManifest(entries, self.concepts, self.train_concepts, self.heldout_concepts, self.source)


def _image_size(entry: Dict[str, Any], image_path: Path, entry_id: str) -> Tuple[int, int]:
    if 'height' in entry and 'width' in entry:
        return int(entry['height']), int(entry['width'])
    if not image_path.exists():
        raise ArtifactNotFoundError(image_path, "image")
    with Image.open(image_path) as img:
        w, h = img.size
    return h, w


def _parse_annotation(raw: Dict[str, Any], size: Tuple[int, int], base_dir: Path, entry_id: str) -> ConceptMask:
    concept = str(raw.get('concept', '')).strip().lower()
    if not concept:
        raise ManifestError("annotation without concept", entry_id)
    record = dict(raw.get('mask') or {'kind': 'full'})
    kind = record.get('kind')
    if kind not in MASK_KINDS:
        raise ManifestError(f"unknown mask kind '{kind}'", entry_id)

    h, w = size
    if kind == 'bbox':
        box = record.get('box')
        if box is None or len(box) != 4:
            raise ManifestError("bbox mask needs box [x0, y0, x1, y1]", entry_id)
        x0, y0, x1, y1 = (int(v) for v in box)
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ManifestError(f"bbox {box} outside image bounds {w}x{h}", entry_id)
        record['box'] = [x0, y0, x1, y1]
    elif kind == 'png' and 'path' not in record:
        raise ManifestError("png mask needs a path", entry_id)

    return ConceptMask(concept=concept, record=record, image_size=size, base_dir=base_dir)


def parse_manifest_lines(lines: Sequence[str], base_dir: Path, source: Optional[Path] = None) -> DatasetManifest:
    entries = []
    seen = set()
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"line {line_number}: invalid JSON ({e})")
        if 'image' not in raw:
            raise ManifestError(f"line {line_number}: missing 'image'")

        image_path = base_dir / raw['image']
        entry_id = str(raw.get('id') or Path(raw['image']).stem)
        if entry_id in seen:
            raise ManifestError("duplicate image id", entry_id)
        seen.add(entry_id)

        size = _image_size(raw, image_path, entry_id)
        if min(size) < MIN_IMAGE_SIDE:
            raise ManifestError(f"image {size[1]}x{size[0]} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}", entry_id)
        annotations = tuple(_parse_annotation(a, size, base_dir, entry_id) for a in raw.get('annotations', []))
        entries.append(ManifestEntry(entry_id, image_path, size, annotations, raw.get('group')))

    concepts = sorted({a.concept for e in entries for a in e.annotations})
    return DatasetManifest(tuple(entries), tuple(concepts), source=source)


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """
    Load a JSON-lines manifest

    Paths inside the manifest are relative to the manifest's directory. Bbox bounds,
    mask kinds and image sizes are validated here; pixels are read later.
    """
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundError(path, "manifest")
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.readlines()
    manifest = parse_manifest_lines(lines, path.parent, source=path)
    logger.info(f"Loaded manifest {path}: {len(manifest)} images, {len(manifest.concepts)} concepts")
    return manifest


def write_manifest(records: Sequence[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """Write manifest records, one JSON object per line with sorted keys"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + '\n')
    return path


def split_concepts(manifest: DatasetManifest, train_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    """
    Randomly partition the concept set into train and held-out concepts

    Returns:
        (train concepts, heldout concepts), both sorted
    """
    if not 0 < train_fraction < 1:
        raise FilterLexError(f"train_fraction must be in (0, 1), got {train_fraction}")
    concepts = sorted(manifest.concepts)
    if len(concepts) < 2:
        raise FilterLexError(f"need at least 2 concepts to split, found {len(concepts)}")

    n_train = int(round(train_fraction * len(concepts)))
    n_train = min(max(n_train, 1), len(concepts) - 1)
    shuffled = concepts[:]
    random.Random(seed).shuffle(shuffled)
    train = sorted(shuffled[:n_train])
    heldout = sorted(shuffled[n_train:])
    return train, heldout


def resize_mask(mask: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """
    Resize a binary mask by area averaging, then threshold at 0.5 (ties count as 1)
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise FilterLexError(f"target mask size must be positive, got {target}")
    mask = np.asarray(mask)
    if mask.shape == (th, tw):
        return (mask != 0).astype(np.uint8)
    src = torch.from_numpy((mask != 0).astype(np.float64))[None, None]
    area = F.interpolate(src, size=(th, tw), mode='area')[0, 0].numpy()
    return (area >= 0.5).astype(np.uint8)


def load_image(entry: ManifestEntry) -> np.ndarray:
    """Read an image as a float32 array of shape 3 x h x w with values in [0, 1]"""
    if not entry.image_path.exists():
        raise ArtifactNotFoundError(entry.image_path, "image")
    with Image.open(entry.image_path) as img:
        arr = np.asarray(img.convert('RGB'), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def materialize(entry: ManifestEntry) -> AnnotatedImage:
    return AnnotatedImage(id=entry.image_id, image=load_image(entry), annotations=list(entry.annotations))
