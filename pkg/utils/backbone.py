#!/usr/bin/env python3
"""
Target Feature Extractor

Provides Feat(x): the convolutional feature maps of the model being explained.
Two kinds of backbone are supported:

- native_cnn: a small trainable CNN (trained here on the reference corpus,
  either as a multi-label concept classifier or as a binary group classifier).
  Any layer can be read out by running the blocks up to it.
- feature_dump: precomputed feature maps of any model, stored in the FMD1
  dump format and looked up by image id. Operations that must re-run the
  network on new pixels are unavailable for this kind.

Also computes per-filter activation thresholds T_u and activation rankings.

Dependencies: torch, numpy, scikit-learn
"""

import struct
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import average_precision_score

from utils.errors import (ArtifactNotFoundError, FilterLexError, TrainingError,
                          UnsupportedOperationError, ConfigError)
from utils.reference_data import DatasetManifest, load_image

logger = logging.getLogger(__name__)

NATIVE_CNN = 'native_cnn'
FEATURE_DUMP = 'feature_dump'
DUMP_MAGIC = b"FMD1"
DEFAULT_SAMPLE_CAP = 10 ** 7


@dataclass
class BackboneArch:
    """Conv widths per block; blocks with pool=True halve the resolution"""
    widths: Tuple[int, ...] = (16, 32, 32, 32)
    pool: Tuple[bool, ...] = (False, True, True, True)
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.pool = tuple(bool(p) for p in self.pool)
        if len(self.widths) != len(self.pool) or not self.widths:
            raise ConfigError("backbone widths and pool flags must have the same non-zero length")

    @property
    def layer_names(self) -> List[str]:
        return [f"conv{i + 1}" for i in range(len(self.widths))]


class ToyCNN(nn.Module):
    def __init__(self, arch: BackboneArch, n_outputs: int):
        super(ToyCNN, self).__init__()
        self.arch = arch
        blocks = []
        in_ch = arch.in_channels
        for width, pool in zip(arch.widths, arch.pool):
            layers = [nn.Conv2d(in_ch, width, kernel_size=3, padding=1), nn.BatchNorm2d(width), nn.ReLU()]
            if pool:
                layers.append(nn.MaxPool2d(2))
            blocks.append(nn.Sequential(*layers))
            in_ch = width
        self.blocks = nn.ModuleDict(zip(arch.layer_names, blocks))
        self.head = nn.Linear(in_ch, n_outputs)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks.values():
            x = block(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        # spatial max: a concept anywhere in the image fires the class
        return self.head(x.amax(dim=(2, 3)))


@dataclass
class FeatureMap:
    values: np.ndarray
    image_id: str
    layer: str


@dataclass
class FeatureSet:
    """Feature maps of one layer for a list of images (n x d x h' x w')"""
    layer: str
    ids: List[str]
    values: np.ndarray
    index: Dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.index:
            self.index = {image_id: i for i, image_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape[1:])

    def get(self, image_id: str) -> FeatureMap:
        i = self.index.get(image_id)
        if i is None:
            raise FilterLexError(f"image '{image_id}' has no extracted features for layer {self.layer}")
        return FeatureMap(self.values[i], image_id, self.layer)

    def max_activations(self, u: int) -> np.ndarray:
        """Spatial max of filter u for every image"""
        return self.values[:, u].reshape(len(self.ids), -1).max(axis=1)


@dataclass
class ThresholdTable:
    layer: str
    quantile_p: float
    thresholds: np.ndarray
    sample_count: int
    degenerate: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'layer': self.layer,
            'quantile_p': self.quantile_p,
            'thresholds': [float(t) for t in self.thresholds],
            'sample_count': self.sample_count,
            'degenerate': list(self.degenerate),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'ThresholdTable':
        return cls(data['layer'], float(data['quantile_p']), np.asarray(data['thresholds'], dtype=np.float64),
                   int(data['sample_count']), list(data.get('degenerate', [])))


class FeatureDump:
    """
    Reader for FMD1 dumps: magic, u32 d, u32 h, u32 w, then per record a u32
    id length, the UTF-8 id and d*h*w little-endian float32 values (channel-major)
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        if not self.path.exists():
            raise ArtifactNotFoundError(self.path, "feature dump")
        with open(self.path, 'rb') as f:
            self._data = f.read()
        if self._data[:4] != DUMP_MAGIC:
            raise FilterLexError(f"{self.path} is not a feature dump (bad magic)")
        self.d, self.h, self.w = struct.unpack_from('<III', self._data, 4)
        self._offsets: Dict[str, int] = {}
        offset = 16
        record_values = self.d * self.h * self.w * 4
        while offset < len(self._data):
            (length,) = struct.unpack_from('<I', self._data, offset)
            image_id = self._data[offset + 4:offset + 4 + length].decode('utf-8')
            self._offsets[image_id] = offset + 4 + length
            offset += 4 + length + record_values

    @property
    def ids(self) -> List[str]:
        return list(self._offsets)

    def lookup(self, image_id: str, layer: str = 'dump') -> FeatureMap:
        offset = self._offsets.get(image_id)
        if offset is None:
            raise FilterLexError(f"image '{image_id}' is not in feature dump {self.path}")
        values = np.frombuffer(self._data, dtype='<f4', count=self.d * self.h * self.w, offset=offset)
        return FeatureMap(values.reshape(self.d, self.h, self.w).astype(np.float32), image_id, layer)


@dataclass
class BackboneHandle:
    kind: str
    layers: Dict[str, int]
    model: Optional[ToyCNN] = None
    dump: Optional[FeatureDump] = None
    class_names: List[str] = field(default_factory=list)
    target: str = 'concepts'
    loss_trace: List[float] = field(default_factory=list)
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def last_layer(self) -> str:
        return list(self.layers)[-1]

    def check_layer(self, layer: str) -> None:
        if layer not in self.layers:
            raise ConfigError(f"unknown layer '{layer}' (available: {', '.join(self.layers)})")


def _images_tensor(manifest: DatasetManifest) -> torch.Tensor:
    return torch.from_numpy(np.stack([load_image(e) for e in manifest.entries]))


def _labels(manifest: DatasetManifest, target: str, class_names: Sequence[str]) -> torch.Tensor:
    if target == 'group':
        return torch.tensor([[1.0 if e.group == 'A' else 0.0] for e in manifest.entries])
    index = {c: i for i, c in enumerate(class_names)}
    labels = torch.zeros(len(manifest), len(class_names))
    for row, entry in enumerate(manifest.entries):
        for concept in entry.concepts:
            labels[row, index[concept]] = 1.0
    return labels


def _mean_average_precision(model: ToyCNN, images: torch.Tensor, labels: torch.Tensor,
                            class_names: Sequence[str]) -> Dict[str, float]:
    if len(images) == 0:
        return {}
    model.eval()
    with torch.no_grad():
        scores = torch.sigmoid(model(images)).numpy()
    truth = labels.numpy()
    metrics = {}
    for i, name in enumerate(class_names):
        if 0 < truth[:, i].sum() < len(truth):
            metrics[f"ap_{name}"] = float(average_precision_score(truth[:, i], scores[:, i]))
    return metrics


def train_toy_backbone(manifest: DatasetManifest, arch: Optional[BackboneArch] = None, epochs: int = 5,
                       seed: int = 0, target: str = 'concepts', learning_rate: float = 3e-3,
                       batch_size: int = 16, validation_fraction: float = 0.1) -> BackboneHandle:
    """
    Train the toy CNN with per-class binary cross-entropy

    Args:
        manifest: Reference corpus (image-level labels only, masks are ignored)
        arch: Conv widths; defaults to 4 blocks down to an 8x8 grid with d=32
        epochs: Number of passes; 0 keeps the random initialization
        seed: Controls initialization, batch order and the validation split
        target: 'concepts' for the multi-label concept classifier, 'group' for the
                binary group (A vs B) classifier

    Returns:
        BackboneHandle exposing every conv block as a layer
    """
    arch = arch or BackboneArch()
    if target not in ('concepts', 'group'):
        raise ConfigError(f"unknown backbone target '{target}'")
    if target == 'group':
        manifest = manifest.subset([e.image_id for e in manifest.entries if e.group in ('A', 'B')])
        class_names = ['group_a']
    else:
        class_names = list(manifest.concepts)
    if len(manifest) == 0:
        raise TrainingError("no labelled images to train the backbone on")

    torch.manual_seed(seed)
    model = ToyCNN(arch, len(class_names))
    handle = BackboneHandle(NATIVE_CNN, dict(zip(arch.layer_names, arch.widths)), model=model,
                            class_names=class_names, target=target)
    if epochs <= 0:
        model.eval()
        logger.info("Backbone left at random initialization (epochs=0)")
        return handle

    images = _images_tensor(manifest)
    labels = _labels(manifest, target, class_names)
    generator = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(images), generator=generator)
    n_val = int(len(images) * validation_fraction)
    val_idx, train_idx = order[:n_val], order[n_val:]

    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    for epoch in range(epochs):
        model.train()
        perm = train_idx[torch.randperm(len(train_idx), generator=generator)]
        total, count = 0.0, 0
        for start in range(0, len(perm), batch_size):
            batch = perm[start:start + batch_size]
            logits = model(images[batch])
            loss = F.binary_cross_entropy_with_logits(logits, labels[batch])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite backbone loss at epoch {epoch + 1}, batch starting {start} "
                                    f"(lr={learning_rate}, batch_size={batch_size})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * len(batch)
            count += len(batch)
        epoch_loss = total / max(count, 1)
        handle.loss_trace.append(epoch_loss)
        logger.info(f"Backbone epoch {epoch + 1}/{epochs}: loss {epoch_loss:.4f}")

    model.eval()
    handle.metrics = _mean_average_precision(model, images[val_idx], labels[val_idx], class_names)
    if handle.metrics:
        logger.info(f"Backbone validation AP (min over classes): {min(handle.metrics.values()):.3f}")
    return handle


def save_backbone(handle: BackboneHandle, path: Union[str, Path]) -> Path:
    if handle.kind != NATIVE_CNN:
        raise UnsupportedOperationError("only native_cnn backbones have checkpoints; dumps are already files")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        'arch': asdict(handle.model.arch),
        'state_dict': handle.model.state_dict(),
        'class_names': handle.class_names,
        'target': handle.target,
        'loss_trace': handle.loss_trace,
        'metrics': handle.metrics,
    }, path)
    return path


def load_backbone(path: Union[str, Path]) -> BackboneHandle:
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundError(path, "backbone checkpoint")
    data = torch.load(path, map_location='cpu', weights_only=False)
    arch = BackboneArch(**data['arch'])
    model = ToyCNN(arch, len(data['class_names']))
    model.load_state_dict(data['state_dict'])
    model.eval()
    return BackboneHandle(NATIVE_CNN, dict(zip(arch.layer_names, arch.widths)), model=model,
                          class_names=list(data['class_names']), target=data['target'],
                          loss_trace=list(data['loss_trace']), metrics=dict(data['metrics']))


def open_dump_backbone(path: Union[str, Path], layer: str = 'dump') -> BackboneHandle:
    dump = FeatureDump(path)
    return BackboneHandle(FEATURE_DUMP, {layer: dump.d}, dump=dump)


def extract_batch(handle: BackboneHandle, images: np.ndarray, layer: str) -> np.ndarray:
    """Forward a batch (n x 3 x h x w) up to `layer` and return its output as float32"""
    if handle.kind != NATIVE_CNN:
        raise UnsupportedOperationError(
            "feature_dump backbones cannot run on new pixels; use lookup_dump by image id")
    handle.check_layer(layer)
    # stateless read-out; worker threads share one model
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
        for name, module in handle.model.blocks.items():
            x = module(x)
            if name == layer:
                break
    return x.numpy().astype(np.float32)


def extract(handle: BackboneHandle, image: np.ndarray, layer: str, image_id: str = '') -> FeatureMap:
    """Feat(x) for a single 3 x h x w image"""
    return FeatureMap(extract_batch(handle, image[None], layer)[0], image_id, layer)


def lookup_dump(handle: BackboneHandle, image_id: str) -> FeatureMap:
    if handle.kind != FEATURE_DUMP:
        raise UnsupportedOperationError("lookup_dump needs a feature_dump backbone")
    return handle.dump.lookup(image_id, handle.last_layer)


def extract_features(handle: BackboneHandle, manifest: DatasetManifest, layer: str,
                     batch_size: int = 64) -> FeatureSet:
    """Feature maps of one layer for every manifest image"""
    handle.check_layer(layer)
    ids = manifest.ids
    if handle.kind == FEATURE_DUMP:
        values = np.stack([handle.dump.lookup(i, layer).values for i in ids])
        return FeatureSet(layer, ids, values)

    chunks = []
    for start in range(0, len(ids), batch_size):
        batch = np.stack([load_image(e) for e in manifest.entries[start:start + batch_size]])
        chunks.append(extract_batch(handle, batch, layer))
    values = np.concatenate(chunks) if chunks else np.zeros((0, handle.layers[layer], 1, 1), np.float32)
    logger.debug(f"Extracted {layer} features for {len(ids)} images: shape {values.shape}")
    return FeatureSet(layer, ids, values)


def write_dump(features: FeatureSet, path: Union[str, Path]) -> Path:
    """Write a FeatureSet in the FMD1 format"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d, h, w = features.shape
    with open(path, 'wb') as f:
        f.write(DUMP_MAGIC)
        f.write(struct.pack('<III', d, h, w))
        for image_id, values in zip(features.ids, features.values):
            encoded = image_id.encode('utf-8')
            f.write(struct.pack('<I', len(encoded)))
            f.write(encoded)
            f.write(np.ascontiguousarray(values, dtype='<f4').tobytes())
    return path


def threshold_from_sample(sample: np.ndarray, quantile_p: float) -> float:
    """Value T such that a fraction quantile_p of the sample lies strictly above it"""
    ordered = np.sort(sample.astype(np.float64))
    n = len(ordered)
    n_above = int(round(n * quantile_p))
    if n_above <= 0:
        return float(ordered[-1])
    if n_above >= n:
        return float(np.nextafter(ordered[0], -np.inf))
    return float(ordered[n - n_above - 1])


def compute_thresholds(features: FeatureSet, quantile_p: float = 0.005, sample_cap: int = DEFAULT_SAMPLE_CAP,
                       seed: int = 0) -> ThresholdTable:
    """
    Per-filter thresholds T_u with P(a_u > T_u) = quantile_p over the pooled
    activations of all spatial positions of all images

    Filters whose activations are constant are flagged as degenerate; an all-zero
    filter gets T_u = 0.
    """
    if not 0 < quantile_p < 1:
        raise ConfigError(f"quantile_p must be in (0, 1), got {quantile_p}")
    if len(features) == 0:
        raise FilterLexError("cannot compute thresholds on an empty dataset")

    n, d = features.values.shape[:2]
    pooled = features.values.transpose(1, 0, 2, 3).reshape(d, -1)
    if pooled.shape[1] > sample_cap:
        keep = np.sort(np.random.default_rng(seed).choice(pooled.shape[1], size=sample_cap, replace=False))
        pooled = pooled[:, keep]

    thresholds = np.zeros(d, dtype=np.float64)
    degenerate = []
    for u in range(d):
        lo, hi = float(pooled[u].min()), float(pooled[u].max())
        if lo == hi:
            degenerate.append(u)
            thresholds[u] = 0.0 if hi == 0.0 else hi
            continue
        thresholds[u] = threshold_from_sample(pooled[u], quantile_p)
    if degenerate:
        logger.warning(f"{len(degenerate)} degenerate (constant) filters in layer {features.layer}: {degenerate}")
    return ThresholdTable(features.layer, quantile_p, thresholds, int(pooled.shape[1]), degenerate)


def top_activated_images(features: FeatureSet, u: int, p_images: int) -> List[str]:
    """Image ids ranked by the spatial max of filter u (descending, ties by id)"""
    if not 1 <= p_images <= len(features):
        raise ConfigError(f"p_images must be between 1 and {len(features)}, got {p_images}")
    maxima = features.max_activations(u).astype(np.float64)
    order = np.lexsort((np.asarray(features.ids), -maxima))
    return [features.ids[i] for i in order[:p_images]]
