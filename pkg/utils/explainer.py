#!/usr/bin/env python3
"""
Feature Explainer

Exp(.) maps a (masked) d x h' x w' feature tensor to a unit vector in the
word-embedding space. Architecture: global average pooling over the grid,
a linear projection d -> e (optionally through one hidden ReLU layer), then
L2 normalization.

Training follows the per-(mask, concept) hinge rank objective: for every
annotated region the explainer output v_hat should score the true concept
vector v_t higher than every other training concept v_c by a margin:

    loss = mean over negatives c of max(0, margin - v_t . v_hat + v_c . v_hat)

Optimized with Adam.
"""

import logging
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from utils.errors import (ArtifactNotFoundError, ConfigError, EmptyMaskError, FilterLexError,
                          TrainingError, UnknownConceptError, ZeroNormEmbeddingError)
from utils.embedding_store import EmbeddingTable, concept_vector, table_fingerprint
from utils.reference_data import DatasetManifest, resize_mask
from utils.backbone import FeatureSet

logger = logging.getLogger(__name__)

ZERO_NORM_EPS = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 5e-3
    batch_size: int = 64
    n_negatives: int = 0
    margin: float = 1.0
    seed: int = 0
    hidden: int = 0
    heldout_fraction: float = 0.1

    def validate(self) -> None:
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0 or self.n_negatives < 0 or self.hidden < 0:
            raise ConfigError("batch_size must be >= 1; epochs, n_negatives and hidden must be >= 0")
        if not 0 <= self.heldout_fraction < 1:
            raise ConfigError("heldout_fraction must be in [0, 1)")


class ExplainerModel(nn.Module):
    def __init__(self, in_channels: int, embed_dim: int, hidden: int = 0):
        super(ExplainerModel, self).__init__()
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.hidden = hidden
        if hidden:
            self.projection = nn.Sequential(nn.Linear(in_channels, hidden), nn.ReLU(), nn.Linear(hidden, embed_dim))
        else:
            self.projection = nn.Linear(in_channels, embed_dim)

    def raw(self, features: torch.Tensor) -> torch.Tensor:
        """Un-normalized output for a batch n x d x h' x w'"""
        return self.projection(features.mean(dim=(2, 3)))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.raw(features), dim=1)


@dataclass
class TrainedExplainer:
    model: ExplainerModel
    concepts: List[str]
    table_fingerprint: str
    history: List[Dict[str, float]] = field(default_factory=list)
    skipped_pairs: int = 0
    missing_concepts: List[str] = field(default_factory=list)


def masked_features(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    F * M: resize M to the feature grid and zero every channel outside it
    """
    d, h, w = features.shape
    small = resize_mask(mask, (h, w))
    if not small.any():
        raise EmptyMaskError(f"mask of shape {mask.shape} has no active cell at {h}x{w}")
    return features * small[None].astype(features.dtype)


def hinge_rank_terms(v_hat: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor,
                     margin: float = 1.0) -> torch.Tensor:
    """max(0, margin - v_t . v_hat + v_c . v_hat) for each negative row"""
    return torch.clamp(margin - positive @ v_hat + negatives @ v_hat, min=0.0)


def hinge_rank_loss(v_hat, t: str, negatives: Sequence[str], table: EmbeddingTable,
                    margin: float = 1.0) -> float:
    """
    Mean hinge rank loss of one explainer output against one concept

    Args:
        v_hat: Unit vector (numpy or torch)
        t: Ground-truth concept
        negatives: Other concepts (must not contain t)
        table: Embedding table resolving concept vectors
        margin: Hinge margin

    Returns:
        Nonnegative loss
    """
    if not negatives:
        raise FilterLexError("hinge rank loss is undefined without negatives")
    if t in negatives:
        raise FilterLexError(f"negatives must exclude the target concept '{t}'")
    v_hat = torch.as_tensor(np.asarray(v_hat, dtype=np.float64))
    positive = torch.as_tensor(concept_vector(table, t).astype(np.float64))
    neg = torch.as_tensor(np.vstack([concept_vector(table, c) for c in negatives]).astype(np.float64))
    return float(hinge_rank_terms(v_hat, positive, neg, margin).mean())


def batch_hinge_loss(v_hat: torch.Tensor, targets: torch.Tensor, concept_vectors: torch.Tensor,
                     margin: float, negatives: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Mean over all hinge terms of a batch

    Args:
        v_hat: n x e unit outputs
        targets: n concept indices into concept_vectors
        concept_vectors: |C| x e
        negatives: optional n x |C| boolean mask from negative_mask; defaults
                   to every concept except the target
    """
    scores = v_hat @ concept_vectors.T
    positive = scores.gather(1, targets[:, None])
    if negatives is None:
        negatives = negative_mask(targets, concept_vectors.shape[0])
    terms = torch.clamp(margin - positive + scores, min=0.0)
    return terms[negatives].mean()


def negative_mask(targets: torch.Tensor, n_concepts: int, n_negatives: int = 0,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Boolean n x |C| mask of the negatives used for each target: every other
    concept when n_negatives is 0 (or not smaller than |C| - 1), otherwise a
    uniform sample of n_negatives of them
    """
    if n_negatives <= 0 or n_negatives >= n_concepts - 1:
        mask = torch.ones(len(targets), n_concepts, dtype=torch.bool)
        mask[torch.arange(len(targets)), targets] = False
        return mask
    mask = torch.zeros(len(targets), n_concepts, dtype=torch.bool)
    for row, t in enumerate(targets.tolist()):
        candidates = torch.tensor([c for c in range(n_concepts) if c != t])
        picked = candidates[torch.randperm(len(candidates), generator=generator)[:n_negatives]]
        mask[row, picked] = True
    return mask


def build_training_pairs(features: FeatureSet, manifest: DatasetManifest, concepts: Sequence[str]
                         ) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Masked features and concept indices for every (mask, concept) pair with a concept in `concepts`

    Returns:
        (inputs n x d x h' x w', targets n, number of skipped empty-mask pairs)
    """
    index = {c: i for i, c in enumerate(concepts)}
    inputs, targets = [], []
    skipped = 0
    for entry in manifest.entries:
        if entry.image_id not in features.index:
            continue
        fmap = features.get(entry.image_id).values
        for annotation in entry.annotations:
            if annotation.concept not in index:
                continue
            try:
                inputs.append(masked_features(fmap, annotation.mask))
            except EmptyMaskError:
                skipped += 1
                continue
            targets.append(index[annotation.concept])
    if skipped:
        logger.warning(f"Skipped {skipped} pairs whose mask is empty at feature resolution")
    if not inputs:
        return np.zeros((0,) + features.shape, np.float32), np.zeros(0, np.int64), skipped
    return np.stack(inputs).astype(np.float32), np.asarray(targets, dtype=np.int64), skipped


def train_explainer(features: FeatureSet, manifest: DatasetManifest, table: EmbeddingTable,
                    cfg: TrainConfig, concepts: Optional[Sequence[str]] = None) -> TrainedExplainer:
    """
    Train Exp(.) on masked features of the reference corpus

    Args:
        features: Target-layer features of the manifest images
        manifest: Reference corpus with concept masks
        table: Word embeddings providing concept vectors
        cfg: Optimization settings
        concepts: Training concepts; defaults to the manifest's train split, or
                  all concepts when no split is set

    Returns:
        TrainedExplainer with per-epoch loss history
    """
    cfg.validate()
    if concepts is None:
        concepts = manifest.train_concepts or manifest.concepts
    concepts = sorted(concepts)

    missing = []
    for c in concepts:
        try:
            concept_vector(table, c)
        except UnknownConceptError:
            missing.append(c)
    if missing:
        logger.warning(f"Skipping {len(missing)} concepts missing from the embedding table: {missing}")
    concepts = [c for c in concepts if c not in missing]
    if len(concepts) < 2:
        raise TrainingError(f"need at least 2 resolvable training concepts, have {concepts}")

    inputs, targets, skipped = build_training_pairs(features, manifest, concepts)
    if len(inputs) == 0:
        raise TrainingError("every training pair was skipped")

    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    d = features.shape[0]
    model = ExplainerModel(d, table.dim, cfg.hidden)
    concept_vecs = torch.from_numpy(np.vstack([concept_vector(table, c) for c in concepts]).astype(np.float32))

    x_all = torch.from_numpy(inputs)
    y_all = torch.from_numpy(targets)
    order = torch.randperm(len(x_all), generator=generator)
    n_held = int(len(x_all) * cfg.heldout_fraction)
    held_idx, train_idx = order[:n_held], order[n_held:]
    if len(train_idx) == 0:
        train_idx = held_idx

    def evaluate(idx: torch.Tensor) -> float:
        if len(idx) == 0:
            return float('nan')
        with torch.no_grad():
            return float(batch_hinge_loss(model(x_all[idx]), y_all[idx], concept_vecs, cfg.margin))

    history = [{'epoch': 0, 'train_loss': evaluate(train_idx), 'heldout_loss': evaluate(held_idx)}]
    logger.info(f"Explainer initial loss {history[0]['train_loss']:.4f} on {len(train_idx)} pairs, "
                f"{len(concepts)} concepts")

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = train_idx[torch.randperm(len(train_idx), generator=generator)]
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            negatives = negative_mask(y_all[batch], len(concepts), cfg.n_negatives, generator)
            loss = batch_hinge_loss(model(x_all[batch]), y_all[batch], concept_vecs, cfg.margin, negatives)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite explainer loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        model.eval()
        record = {'epoch': epoch, 'train_loss': evaluate(train_idx), 'heldout_loss': evaluate(held_idx)}
        history.append(record)
        logger.info(f"Explainer epoch {epoch}/{cfg.epochs}: train {record['train_loss']:.4f} "
                    f"heldout {record['heldout_loss']:.4f}")

    model.eval()
    return TrainedExplainer(model, list(concepts), table_fingerprint(table), history, skipped, missing)


def embed(explainer: Union[TrainedExplainer, ExplainerModel], features: np.ndarray) -> np.ndarray:
    """Exp(features) as a unit float64 vector"""
    model = explainer.model if isinstance(explainer, TrainedExplainer) else explainer
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 3 or features.shape[0] != model.in_channels:
        raise FilterLexError(f"explainer expects {model.in_channels} x h x w features, got {features.shape}")
    with torch.no_grad():
        raw = model.raw(torch.from_numpy(np.ascontiguousarray(features))[None])[0].double().numpy()
    norm = np.linalg.norm(raw)
    if norm <= ZERO_NORM_EPS:
        raise ZeroNormEmbeddingError("explainer output has zero norm; cannot normalize")
    return raw / norm


def save_explainer(explainer: TrainedExplainer, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = explainer.model
    torch.save({
        'in_channels': model.in_channels,
        'embed_dim': model.embed_dim,
        'hidden': model.hidden,
        'state_dict': model.state_dict(),
        'concepts': explainer.concepts,
        'table_fingerprint': explainer.table_fingerprint,
        'history': explainer.history,
        'skipped_pairs': explainer.skipped_pairs,
        'missing_concepts': explainer.missing_concepts,
    }, path)
    return path


def load_explainer(path: Union[str, Path], table: Optional[EmbeddingTable] = None) -> TrainedExplainer:
    """Load a checkpoint; warns when the embedding table differs from the one used in training"""
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundError(path, "explainer checkpoint")
    data = torch.load(path, map_location='cpu', weights_only=False)
    model = ExplainerModel(data['in_channels'], data['embed_dim'], data['hidden'])
    model.load_state_dict(data['state_dict'])
    model.eval()
    if table is not None and table_fingerprint(table) != data['table_fingerprint']:
        logger.warning(f"Explainer {path} was trained against a different embedding table")
    return TrainedExplainer(model, list(data['concepts']), data['table_fingerprint'], list(data['history']),
                            int(data['skipped_pairs']), list(data['missing_concepts']))


def write_history_csv(explainer: TrainedExplainer, path: Union[str, Path]) -> Path:
    """Per-epoch train / held-out loss as CSV"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(explainer.history, columns=['epoch', 'train_loss', 'heldout_loss']).to_csv(path, index=False)
    return path
