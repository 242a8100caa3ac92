#!/usr/bin/env python3
"""
Explanation Scoring

Objective recall of word explanations against annotated concepts:

- the activated region of filter u on image i is (F_u > T_u) at feature resolution
- a concept is ground truth for (u, i) when IoU(region, resized mask) > iou_threshold
- Recall_{u,i} = |W_u ∩ G_{u,i}| / |G_{u,i}|, averaged over the pairs with a nonempty G

Only single-token concept names take part in G; multi-token concepts stay usable
for explainer training but are never scored.

Dependencies:
- numpy for masks and IoU
- pandas for the CSV summary
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.errors import FilterLexError, UndefinedStatisticError
from utils.embedding_store import split_concept_name
from utils.reference_data import DatasetManifest, resize_mask
from utils.backbone import FeatureSet, ThresholdTable, top_activated_images
from utils.probe import Explanation

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.04
DEFAULT_X_SWEEP = (5, 10, 20)


@dataclass
class GroundTruthAssignment:
    filter: int
    image_id: str
    concepts: Tuple[str, ...]
    ious: Dict[str, float] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.concepts


@dataclass
class ScoreReport:
    layer: str
    strategy: str
    x_sweep: List[int]
    recall: Dict[int, float]
    precision: Dict[int, float]
    n_pairs: int
    skipped_pairs: int
    per_filter: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'layer': self.layer,
            'strategy': self.strategy,
            'x_sweep': list(self.x_sweep),
            'recall': {str(x): round(v, 6) for x, v in self.recall.items()},
            'precision': {str(x): round(v, 6) for x, v in self.precision.items()},
            'n_pairs': self.n_pairs,
            'skipped_pairs': self.skipped_pairs,
            'per_filter': self.per_filter,
        }


def activated_region(values: np.ndarray, u: int, threshold: float) -> np.ndarray:
    """Binary h' x w' map of the cells where filter u strictly exceeds its threshold"""
    return (values[u] > threshold).astype(np.uint8)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks (0 when both are empty)"""
    a = np.asarray(a) != 0
    b = np.asarray(b) != 0
    if a.shape != b.shape:
        raise FilterLexError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def is_scorable(concept: str) -> bool:
    return len(split_concept_name(concept)) == 1


def assign_ground_truth(values: np.ndarray, u: int, threshold: float,
                        annotations: Sequence[Tuple[str, np.ndarray]],
                        iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                        image_id: str = '') -> GroundTruthAssignment:
    """
    Ground-truth concepts of filter u on one image

    Args:
        values: d x h' x w' feature map
        u: Filter index
        threshold: T_u
        annotations: (concept, mask already resized to h' x w') pairs
        iou_threshold: Strict lower bound on IoU

    Returns:
        GroundTruthAssignment with every annotated concept's IoU kept for audit
    """
    region = activated_region(values, u, threshold)
    ious: Dict[str, float] = {}
    for concept, mask in annotations:
        # several masks of one concept: keep the best overlap
        ious[concept] = max(ious.get(concept, 0.0), iou(region, mask))
    concepts = tuple(sorted(c for c, v in ious.items() if v > iou_threshold and is_scorable(c)))
    return GroundTruthAssignment(u, image_id, concepts, ious)


def resized_annotations(manifest: DatasetManifest, image_id: str,
                        size: Tuple[int, int]) -> List[Tuple[str, np.ndarray]]:
    entry = manifest.entry(image_id)
    return [(a.concept, resize_mask(a.mask, size)) for a in entry.annotations]


def assign_for_explanations(explanations: Sequence[Explanation], features: FeatureSet,
                            manifest: DatasetManifest, thresholds: ThresholdTable,
                            iou_threshold: float = DEFAULT_IOU_THRESHOLD
                            ) -> Dict[Tuple[int, str], GroundTruthAssignment]:
    """G_{u,i} for each explained filter u and each of its top-p activated images"""
    _, h, w = features.shape
    mask_cache: Dict[str, List[Tuple[str, np.ndarray]]] = {}
    assignments = {}
    for explanation in explanations:
        u = explanation.filter
        p = min(explanation.params['p'], len(features))
        for image_id in top_activated_images(features, u, p):
            if image_id not in mask_cache:
                mask_cache[image_id] = resized_annotations(manifest, image_id, (h, w))
            assignments[(u, image_id)] = assign_ground_truth(
                features.get(image_id).values, u, thresholds.thresholds[u],
                mask_cache[image_id], iou_threshold, image_id)
    return assignments


def recall_filter_image(words: Iterable[str], ground_truth: Iterable[str]) -> Optional[float]:
    """|W ∩ G| / |G|, or None when G is empty (the pair is skipped)"""
    truth = set(ground_truth)
    if not truth:
        return None
    return len(set(words) & truth) / len(truth)


def precision_filter_image(words: Iterable[str], ground_truth: Iterable[str]) -> Optional[float]:
    predicted = set(words)
    if not predicted:
        return None
    return len(predicted & set(ground_truth)) / len(predicted)


def score_model(explanations: Sequence[Explanation], assignments: Dict[Tuple[int, str], GroundTruthAssignment],
                x_sweep: Sequence[int] = DEFAULT_X_SWEEP,
                restrict_to: Optional[Iterable[str]] = None) -> ScoreReport:
    """
    Aggregate recall@x (and precision@x) over all (filter, image) pairs with nonempty ground truth

    Args:
        explanations: One per filter
        assignments: (filter, image_id) -> GroundTruthAssignment, as built by assign_for_explanations
        x_sweep: Explanation lengths to score
        restrict_to: Only these concepts count as ground truth (novel-concept recall)

    Raises:
        UndefinedStatisticError: no pair has a nonempty ground truth
    """
    x_sweep = sorted(set(int(x) for x in x_sweep))
    if not x_sweep or x_sweep[0] < 1:
        raise FilterLexError(f"x_sweep must hold positive counts, got {x_sweep}")
    allowed = set(restrict_to) if restrict_to is not None else None
    by_filter: Dict[int, List[GroundTruthAssignment]] = {}
    for (u, _), assignment in sorted(assignments.items()):
        by_filter.setdefault(u, []).append(assignment)

    recalls = {x: [] for x in x_sweep}
    precisions = {x: [] for x in x_sweep}
    per_filter = []
    skipped = 0
    for explanation in sorted(explanations, key=lambda e: e.filter):
        filter_recalls = {x: [] for x in x_sweep}
        g_sizes = []
        for assignment in by_filter.get(explanation.filter, []):
            truth = set(assignment.concepts)
            if allowed is not None:
                truth &= allowed
            if not truth:
                skipped += 1
                continue
            g_sizes.append(len(truth))
            for x in x_sweep:
                words = explanation.top(x)
                r = recall_filter_image(words, truth)
                recalls[x].append(r)
                filter_recalls[x].append(r)
                pr = precision_filter_image(words, truth)
                if pr is not None:
                    precisions[x].append(pr)
        row = {'filter': explanation.filter, 'top_word': explanation.top_word, 'n_pairs': len(g_sizes)}
        for x in x_sweep:
            row[f'recall@{x}'] = round(float(np.mean(filter_recalls[x])), 6) if filter_recalls[x] else None
        row['g_size_mean'] = round(float(np.mean(g_sizes)), 6) if g_sizes else None
        row['g_size_max'] = max(g_sizes) if g_sizes else None
        per_filter.append(row)

    n_pairs = len(recalls[x_sweep[0]])
    if n_pairs == 0:
        raise UndefinedStatisticError(f"no (filter, image) pair has a nonempty ground truth ({skipped} skipped)")
    if skipped:
        logger.info(f"Skipped {skipped} pairs with empty ground truth, scored {n_pairs}")

    first = explanations[0] if explanations else None
    return ScoreReport(
        layer=first.layer if first else '',
        strategy=first.strategy if first else '',
        x_sweep=x_sweep,
        recall={x: float(np.mean(recalls[x])) for x in x_sweep},
        precision={x: float(np.mean(precisions[x])) if precisions[x] else 0.0 for x in x_sweep},
        n_pairs=n_pairs,
        skipped_pairs=skipped,
        per_filter=per_filter,
    )


def write_score_report(report: ScoreReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    return path


def write_score_csv(report: ScoreReport, path: Union[str, Path]) -> Path:
    """Per-filter summary: filter, recall@x columns, |G| stats"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(report.per_filter)
    df.to_csv(path, index=False)
    return path


def recall_table(reports: Sequence[ScoreReport], key: str = 'strategy') -> pd.DataFrame:
    """Long table (label, x, recall) across reports, consumed by the recall plot"""
    rows = []
    for report in reports:
        label = getattr(report, key)
        for x, value in report.recall.items():
            rows.append({key: label, 'x': x, 'recall': value})
    return pd.DataFrame(rows, columns=[key, 'x', 'recall'])
