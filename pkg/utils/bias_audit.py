#!/usr/bin/env python3
"""
Group Bias Audit

Unsupervised comparison of two image groups through a model's filters:

- qualified images of filter u: max activation of u strictly above T_u
- disparity of u: |pct_A - pct_B| where pct_g is the share of group g that qualifies
- group ratio of u: N_A / (N_A + N_B) over its qualified images
- concept ratio: mean ratio over the filters whose top-1 explanation word is the concept

Discovered concept ratios can be checked against ratios counted directly from the
manifest annotations with a Pearson correlation.

Dependencies:
- numpy, pandas
- scipy.stats for the Pearson correlation
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import pearsonr

from utils.errors import ConfigError, UndefinedStatisticError
from utils.embedding_store import EmbeddingTable
from utils.reference_data import DatasetManifest
from utils.backbone import BackboneHandle, FeatureSet, ThresholdTable
from utils.explainer import TrainedExplainer
from utils.probe import Explanation, ProbeStrategy, explain_model

logger = logging.getLogger(__name__)

GROUP_A = 'A'
GROUP_B = 'B'
MIN_SHARED_CONCEPTS = 3


@dataclass
class GroupedDataset:
    """Images labelled with exactly one of two groups"""
    manifest: DatasetManifest
    group_of: Dict[str, str]
    excluded: int = 0

    def __post_init__(self):
        sizes = self.sizes
        if sizes[GROUP_A] == 0 or sizes[GROUP_B] == 0:
            raise ConfigError(f"both groups need images, got {sizes}")

    @property
    def sizes(self) -> Dict[str, int]:
        values = list(self.group_of.values())
        return {GROUP_A: values.count(GROUP_A), GROUP_B: values.count(GROUP_B)}

    def members(self, group: str) -> Set[str]:
        return {i for i, g in self.group_of.items() if g == group}

    def swapped(self) -> 'GroupedDataset':
        flip = {GROUP_A: GROUP_B, GROUP_B: GROUP_A}
        return GroupedDataset(self.manifest, {i: flip[g] for i, g in self.group_of.items()}, self.excluded)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> 'GroupedDataset':
        """
        Keep the entries whose group field is A or B; unlabelled entries and entries
        tied to both groups are left out
        """
        group_of = {}
        for entry in manifest.entries:
            label = str(entry.group).strip().upper() if entry.group is not None else ''
            if label in (GROUP_A, GROUP_B):
                group_of[entry.image_id] = label
        excluded = len(manifest) - len(group_of)
        if excluded:
            logger.info(f"Excluded {excluded} images without a single group label")
        kept = manifest.subset(list(group_of))
        return cls(kept, group_of, excluded)


@dataclass
class BiasReport:
    layer: str
    rows: List[Dict]
    top_k: int
    concept_ratios: Dict[str, Dict]
    rho: Optional[float] = None
    scatter: Optional[pd.DataFrame] = field(default=None, repr=False)

    @property
    def top_rows(self) -> List[Dict]:
        return self.rows[:self.top_k]

    def to_dict(self) -> Dict:
        return {
            'layer': self.layer,
            'top_k': self.top_k,
            'top_filters': self.top_rows,
            'filters': self.rows,
            'concept_ratios': self.concept_ratios,
            'rho': None if self.rho is None else round(self.rho, 6),
        }


def qualified_images(features: FeatureSet, u: int, threshold: float) -> Set[str]:
    """Images whose spatial max of filter u is strictly above the threshold"""
    maxima = features.max_activations(u)
    return {image_id for image_id, m in zip(features.ids, maxima) if m > threshold}


def filter_disparity(qualified: Iterable[str], groups: GroupedDataset) -> Tuple[float, float, float]:
    """
    Returns:
        (pct_A, pct_B, |pct_A - pct_B|), percentages of each group that qualify
    """
    sizes = groups.sizes
    for g, n in sizes.items():
        if n == 0:
            raise UndefinedStatisticError(f"group {g} is empty")
    counts = {GROUP_A: 0, GROUP_B: 0}
    for image_id in qualified:
        g = groups.group_of.get(image_id)
        if g is not None:
            counts[g] += 1
    pct_a = 100.0 * counts[GROUP_A] / sizes[GROUP_A]
    pct_b = 100.0 * counts[GROUP_B] / sizes[GROUP_B]
    return pct_a, pct_b, abs(pct_a - pct_b)


def group_counts(qualified: Iterable[str], groups: GroupedDataset) -> Tuple[int, int]:
    n_a = n_b = 0
    for image_id in qualified:
        g = groups.group_of.get(image_id)
        if g == GROUP_A:
            n_a += 1
        elif g == GROUP_B:
            n_b += 1
    return n_a, n_b


def group_ratio(n_a: int, n_b: int) -> Optional[float]:
    """N_A / (N_A + N_B); None when both counts are zero"""
    if n_a + n_b == 0:
        return None
    return n_a / (n_a + n_b)


def concept_ratio(ratios: Iterable[Optional[float]]) -> Optional[float]:
    """Mean of the defined ratios of the filters associated with a concept"""
    defined = [r for r in ratios if r is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def annotation_ratios(groups: GroupedDataset) -> Dict[str, float]:
    """Reference ratio per concept: share of group A among the images annotated with it"""
    counts: Dict[str, List[int]] = {}
    for entry in groups.manifest.entries:
        g = groups.group_of.get(entry.image_id)
        if g is None:
            continue
        for concept in set(entry.concepts):
            pair = counts.setdefault(concept, [0, 0])
            pair[0 if g == GROUP_A else 1] += 1
    ratios = {}
    for concept, (n_a, n_b) in sorted(counts.items()):
        r = group_ratio(n_a, n_b)
        if r is not None:
            ratios[concept] = r
    return ratios


def validate_against_annotations(discovered: Dict[str, float], reference: Dict[str, float]
                                 ) -> Tuple[Optional[float], pd.DataFrame]:
    """
    Pearson correlation between discovered and reference concept ratios

    Returns:
        (rho or None when either side has zero variance, scatter table of the shared concepts)

    Raises:
        UndefinedStatisticError: fewer than three shared concepts
    """
    shared = sorted(set(discovered) & set(reference))
    scatter = pd.DataFrame({
        'concept': shared,
        'discovered_ratio': [discovered[c] for c in shared],
        'reference_ratio': [reference[c] for c in shared],
    })
    if len(shared) < MIN_SHARED_CONCEPTS:
        raise UndefinedStatisticError(
            f"need at least {MIN_SHARED_CONCEPTS} shared concepts for a correlation, got {len(shared)}")
    if scatter['discovered_ratio'].nunique() < 2 or scatter['reference_ratio'].nunique() < 2:
        logger.warning("Correlation undefined: zero variance in discovered or reference ratios")
        return None, scatter
    rho, _ = pearsonr(scatter['discovered_ratio'], scatter['reference_ratio'])
    return float(rho), scatter


def filter_rows(explanations: Dict[int, Explanation], features: FeatureSet, thresholds: ThresholdTable,
                groups: GroupedDataset) -> List[Dict]:
    """One row per filter, ranked by disparity (descending) then filter index"""
    rows = []
    for u in range(features.shape[0]):
        qualified = qualified_images(features, u, thresholds.thresholds[u])
        pct_a, pct_b, disparity = filter_disparity(qualified, groups)
        n_a, n_b = group_counts(qualified, groups)
        explanation = explanations.get(u)
        ratio = group_ratio(n_a, n_b)
        rows.append({
            'filter': u,
            'top_word': explanation.top_word if explanation else None,
            'pct_a': round(pct_a, 6),
            'pct_b': round(pct_b, 6),
            'disparity': round(disparity, 6),
            'n_a': n_a,
            'n_b': n_b,
            'ratio': None if ratio is None else round(ratio, 6),
        })
    rows.sort(key=lambda r: (-r['disparity'], r['filter']))
    return rows


def concept_ratios_from_rows(rows: Iterable[Dict]) -> Dict[str, Dict]:
    by_word: Dict[str, List[Optional[float]]] = {}
    for row in rows:
        if row['top_word'] is not None:
            by_word.setdefault(row['top_word'], []).append(row['ratio'])
    result = {}
    for word, ratios in sorted(by_word.items()):
        r = concept_ratio(ratios)
        if r is not None:
            result[word] = {'ratio': round(r, 6), 'n_filters': sum(1 for x in ratios if x is not None)}
    return result


def audit(backbone: BackboneHandle, explainer: TrainedExplainer, table: EmbeddingTable, groups: GroupedDataset,
          features: FeatureSet, thresholds: ThresholdTable, strategy: ProbeStrategy,
          s: int = 5, p: int = 10, x: int = 5, top_k: int = 10,
          reference: Optional[Dict[str, float]] = None, jobs: int = 1) -> BiasReport:
    """
    Explain every filter, rank filters by group disparity and aggregate concept ratios

    Args:
        features: Feature maps of the grouped images at the audited layer
        thresholds: T_u for the same layer
        reference: Concept -> reference ratio; when given the Pearson rho is filled in

    Returns:
        BiasReport
    """
    explanations, failures = explain_model(backbone, explainer, table, features, groups.manifest, strategy,
                                           s, p, x, jobs=jobs)
    by_filter = {e.filter: e for e in explanations}
    rows = filter_rows(by_filter, features, thresholds, groups)
    concepts = concept_ratios_from_rows(rows)
    report = BiasReport(features.layer, rows, top_k, concepts)

    if reference:
        discovered = {c: v['ratio'] for c, v in concepts.items()}
        try:
            report.rho, report.scatter = validate_against_annotations(discovered, reference)
        except UndefinedStatisticError as e:
            logger.warning(f"Skipping correlation: {e}")
    logger.info(f"Audited {len(rows)} filters ({len(failures)} unexplained), {len(concepts)} concepts")
    return report


def write_bias_report(report: BiasReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    return path


def write_bias_csv(report: BiasReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(report.rows).to_csv(path, index=False)
    return path


def write_scatter_csv(scatter: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scatter.to_csv(path, index=False)
    return path
