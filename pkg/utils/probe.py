#!/usr/bin/env python3
"""
Filter Probing

Turns a trained explainer into per-filter word explanations:

1. rank images by the filter's maximum activation and keep the top p
2. build the explainer input for each image with a probing strategy
   - filter_attention: reweight every channel k by cos(F_u, F_k)
   - original_image: the unmodified feature map
   - activation_masking: zero every channel where F_u <= T_u
   - image_masking: zero the pixels where F_u <= T_u and re-extract features
3. embed, collect the s nearest words per image
4. rank the s * p words by frequency (then mean similarity, then token)
"""

import json
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from utils.errors import (ConfigError, EmptyExplanationError, FilterLexError, UnsupportedOperationError,
                          ZeroNormEmbeddingError)
from utils.embedding_store import EmbeddingTable, nearest_words
from utils.reference_data import DatasetManifest, load_image
from utils.backbone import (BackboneHandle, FeatureSet, ThresholdTable, NATIVE_CNN, extract,
                            top_activated_images)
from utils.explainer import TrainedExplainer, embed

logger = logging.getLogger(__name__)

FILTER_ATTENTION = 'filter_attention'
ORIGINAL_IMAGE = 'original_image'
IMAGE_MASKING = 'image_masking'
ACTIVATION_MASKING = 'activation_masking'
STRATEGIES = (FILTER_ATTENTION, ORIGINAL_IMAGE, IMAGE_MASKING, ACTIVATION_MASKING)

# command-line spellings
STRATEGY_ALIASES = {
    'attention': FILTER_ATTENTION,
    'original': ORIGINAL_IMAGE,
    'image-mask': IMAGE_MASKING,
    'act-mask': ACTIVATION_MASKING,
}


def resolve_strategy_name(name: str) -> str:
    kind = STRATEGY_ALIASES.get(name, name)
    if kind not in STRATEGIES:
        raise ConfigError(f"unknown strategy '{name}' (use one of {', '.join(STRATEGY_ALIASES)})")
    return kind


@dataclass
class ProbeStrategy:
    kind: str
    thresholds: Optional[ThresholdTable] = None
    clamp_negative: bool = False

    def __post_init__(self):
        self.kind = resolve_strategy_name(self.kind)
        if self.kind in (IMAGE_MASKING, ACTIVATION_MASKING) and self.thresholds is None:
            raise ConfigError(f"strategy {self.kind} needs a threshold table")


@dataclass
class Explanation:
    filter: int
    layer: str
    strategy: str
    words: List[Tuple[str, int, float]]
    evidence: List[Tuple[str, List[str], float]]
    params: Dict[str, int]
    skipped_images: int = 0

    def top(self, x: Optional[int] = None) -> List[str]:
        x = self.params['x'] if x is None else x
        return [token for token, _, _ in self.words[:x]]

    @property
    def top_word(self) -> Optional[str]:
        return self.words[0][0] if self.words else None

    def to_record(self) -> Dict:
        return {
            'filter': self.filter,
            'layer': self.layer,
            'strategy': self.strategy,
            'params': dict(self.params),
            'words': [{'token': t, 'count': c, 'mean_sim': round(m, 6)} for t, c, m in self.words],
            'evidence': [{'image': i, 'tokens': list(toks), 'max_act': round(a, 6)} for i, toks, a in self.evidence],
            'skipped_images': self.skipped_images,
        }

    @classmethod
    def from_record(cls, record: Dict) -> 'Explanation':
        return cls(
            filter=int(record['filter']),
            layer=record['layer'],
            strategy=record['strategy'],
            words=[(w['token'], int(w['count']), float(w['mean_sim'])) for w in record['words']],
            evidence=[(e['image'], list(e['tokens']), float(e['max_act'])) for e in record['evidence']],
            params={k: int(v) for k, v in record['params'].items()},
            skipped_images=int(record.get('skipped_images', 0)),
        )


def attention_weights(values: np.ndarray, u: int) -> np.ndarray:
    """Cosine similarity between the flattened map of filter u and every channel (0 for zero-norm maps)"""
    d = values.shape[0]
    if not 0 <= u < d:
        raise FilterLexError(f"filter index {u} out of range for {d} filters")
    flat = values.reshape(d, -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    weights = np.zeros(d, dtype=np.float64)
    if norms[u] == 0:
        return weights
    nonzero = norms > 0
    weights[nonzero] = (flat[nonzero] @ flat[u]) / (norms[nonzero] * norms[u])
    weights[u] = 1.0
    return np.clip(weights, -1.0, 1.0)


def filter_attention(values: np.ndarray, u: int, clamp_negative: bool = False) -> np.ndarray:
    """F_att_k = a(F_u, F_k) * F_k for every channel k"""
    weights = attention_weights(values, u)
    if clamp_negative:
        weights = np.maximum(weights, 0.0)
    return (values * weights[:, None, None]).astype(values.dtype)


def activated_cells(values: np.ndarray, u: int, threshold: float) -> np.ndarray:
    return (values[u] > threshold).astype(np.uint8)


def upscale_region(region: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upscaling of a binary h' x w' region to image size"""
    src = torch.from_numpy(region.astype(np.float32))[None, None]
    return F.interpolate(src, size=size, mode='nearest')[0, 0].numpy().astype(np.uint8)


def apply_strategy(strategy: ProbeStrategy, backbone: BackboneHandle, values: np.ndarray, u: int,
                   image: Optional[np.ndarray] = None, layer: Optional[str] = None) -> Tuple[np.ndarray, bool]:
    """
    Explainer input for filter u on one image

    Args:
        strategy: How the feature map is modified
        backbone: Needed for image_masking (features are re-extracted)
        values: d x h' x w' feature map of the image
        u: Filter index
        image: 3 x h x w pixels (image_masking only)
        layer: Layer to re-extract (image_masking only)

    Returns:
        (d x h' x w' array, True when the masking left nothing active)
    """
    if strategy.kind == ORIGINAL_IMAGE:
        return values, False
    if strategy.kind == FILTER_ATTENTION:
        out = filter_attention(values, u, strategy.clamp_negative)
        return out, not np.any(out)

    region = activated_cells(values, u, strategy.thresholds.thresholds[u])
    if strategy.kind == ACTIVATION_MASKING:
        return values * region[None].astype(values.dtype), not region.any()

    if backbone.kind != NATIVE_CNN:
        raise UnsupportedOperationError("image masking needs a native backbone to re-run on masked pixels")
    if image is None:
        raise FilterLexError("image masking needs the image pixels")
    pixel_mask = upscale_region(region, image.shape[1:])
    masked = image * pixel_mask[None].astype(image.dtype)
    out = extract(backbone, masked, layer or strategy.thresholds.layer).values
    return out, not region.any()


def rank_words(collected: Iterable[Tuple[str, float]]) -> List[Tuple[str, int, float]]:
    """Frequency ranking; ties broken by mean similarity (descending) then token"""
    counts: Counter = Counter()
    sims: Dict[str, List[float]] = defaultdict(list)
    for token, sim in collected:
        counts[token] += 1
        sims[token].append(sim)
    ranked = [(tok, counts[tok], float(np.mean(sims[tok]))) for tok in counts]
    ranked.sort(key=lambda item: (-item[1], -item[2], item[0]))
    return ranked


def explain_filter(backbone: BackboneHandle, explainer: TrainedExplainer, table: EmbeddingTable,
                   features: FeatureSet, manifest: DatasetManifest, u: int, strategy: ProbeStrategy,
                   s: int = 5, p: int = 10, x: int = 5) -> Explanation:
    """
    Word explanation of filter u from its top-p activated images

    Raises:
        EmptyExplanationError: every probed image produced an empty input
    """
    if min(s, p, x) < 1:
        raise ConfigError("s, p and x must all be at least 1")
    top_ids = top_activated_images(features, u, min(p, len(features)))
    collected: List[Tuple[str, float]] = []
    evidence = []
    skipped = 0
    for image_id in top_ids:
        values = features.get(image_id).values
        image = load_image(manifest.entry(image_id)) if strategy.kind == IMAGE_MASKING else None
        probe_input, empty = apply_strategy(strategy, backbone, values, u, image, features.layer)
        if empty:
            skipped += 1
            continue
        try:
            v_hat = embed(explainer, probe_input)
        except ZeroNormEmbeddingError as e:
            logger.debug(f"Filter {u}, image {image_id}: {e}")
            skipped += 1
            continue
        words = nearest_words(table, v_hat, s)
        collected.extend(words)
        evidence.append((image_id, [tok for tok, _ in words], float(values[u].max())))

    if not collected:
        raise EmptyExplanationError(u)
    return Explanation(u, features.layer, strategy.kind, rank_words(collected), evidence,
                       {'s': s, 'p': p, 'x': x}, skipped)


def explain_model(backbone: BackboneHandle, explainer: TrainedExplainer, table: EmbeddingTable,
                  features: FeatureSet, manifest: DatasetManifest, strategy: ProbeStrategy,
                  s: int = 5, p: int = 10, x: int = 5, filters: Optional[Sequence[int]] = None,
                  jobs: int = 1) -> Tuple[List[Explanation], Dict[int, str]]:
    """
    explain_filter over all (or a subset of) filters

    Returns:
        (explanations in filter order, {filter: failure message} for filters that could not be explained)
    """
    d = features.shape[0]
    filters = list(range(d)) if filters is None else list(filters)

    def run(u: int):
        try:
            return explain_filter(backbone, explainer, table, features, manifest, u, strategy, s, p, x), None
        except EmptyExplanationError as e:
            return None, str(e)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, filters))
    else:
        results = [run(u) for u in filters]

    explanations, failures = [], {}
    for u, (explanation, error) in zip(filters, results):
        if explanation is None:
            failures[u] = error
        else:
            explanations.append(explanation)
    if failures:
        logger.warning(f"{len(failures)} of {len(filters)} filters produced no explanation ({strategy.kind})")
    return explanations, failures


def count_discovered_concepts(explanations: Sequence[Explanation],
                              vocabulary: Optional[Iterable[str]] = None) -> Dict[str, int]:
    """Number of filters whose top-1 word is each token (optionally restricted to a vocabulary)"""
    allowed = set(vocabulary) if vocabulary is not None else None
    counts: Counter = Counter()
    for explanation in explanations:
        word = explanation.top_word
        if word is not None and (allowed is None or word in allowed):
            counts[word] += 1
    return dict(sorted(counts.items()))


def write_explanations(explanations: Sequence[Explanation], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for explanation in explanations:
            f.write(json.dumps(explanation.to_record(), sort_keys=True) + '\n')
    return path


def read_explanations(path: Union[str, Path]) -> List[Explanation]:
    with open(path, 'r', encoding='utf-8') as f:
        return [Explanation.from_record(json.loads(line)) for line in f if line.strip()]
