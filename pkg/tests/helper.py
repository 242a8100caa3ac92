#!/usr/bin/env python3
# Helper functions for tests: tiny fixtures shared by the test modules

import os
import sys
from pathlib import Path

import numpy as np
import torch

# Add parent directory to path to import the modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.embedding_store import EmbeddingTable, table_fingerprint, write_embeddings_text
from utils.synth_corpus import SynthSpec, ConceptSpec, RED, BLUE, generate, write_surrogate_embeddings
from utils.backbone import BackboneArch, FeatureSet, ThresholdTable
from utils.explainer import ExplainerModel, TrainedExplainer


def unit_rows(n, dim, seed=0):
    """n random unit vectors of length dim"""
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((n, dim))
    return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)


def make_table(tokens, dim=8, seed=0):
    """EmbeddingTable with random unit rows for the given tokens"""
    return EmbeddingTable(tuple(tokens), unit_rows(len(tokens), dim, seed))


def write_toy_embeddings(path, tokens, dim=8, seed=0):
    return write_embeddings_text(tokens, unit_rows(len(tokens), dim, seed).astype(np.float64), path)


def tiny_spec(n_images=24, seed=0, group_bias=None, max_concepts=2):
    """Four concepts on 32x32 images, small enough for unit tests"""
    concepts = [
        ConceptSpec('brick', 'square', RED), ConceptSpec('ball', 'disc', BLUE),
        ConceptSpec('roof', 'triangle', RED), ConceptSpec('wave', 'stripes', BLUE),
    ]
    return SynthSpec(n_images=n_images, image_size=(32, 32), concepts=concepts,
                     max_concepts_per_image=max_concepts, group_bias=group_bias, seed=seed,
                     min_shape_size=8, max_shape_size=12)


def make_corpus(out_dir, n_images=24, seed=0, group_bias=None, max_concepts=2):
    """Generate a tiny corpus with surrogate embeddings; returns (manifest, embeddings path)"""
    spec = tiny_spec(n_images, seed, group_bias, max_concepts)
    manifest = generate(spec, out_dir)
    embeddings = write_surrogate_embeddings(spec, Path(out_dir) / 'embeddings.txt', dim=16, seed=seed)
    return manifest, embeddings


def tiny_arch():
    """Two conv blocks, 16x16 grid on 32x32 inputs"""
    return BackboneArch(widths=(4, 8), pool=(False, True))


def random_features(n=6, d=4, h=4, w=4, seed=0, layer='conv2', ids=None):
    """FeatureSet of nonnegative random maps"""
    rng = np.random.default_rng(seed)
    values = np.maximum(rng.standard_normal((n, d, h, w)), 0.0).astype(np.float32)
    ids = ids or [f"img{i:03d}" for i in range(n)]
    return FeatureSet(layer, list(ids), values)


def constant_thresholds(d, value=0.5, layer='conv2'):
    return ThresholdTable(layer, 0.005, np.full(d, value, dtype=np.float64), 0)


def fixed_explainer(table, token, in_channels=4):
    """Explainer whose output is always the vector of `token`"""
    model = ExplainerModel(in_channels, table.dim)
    with torch.no_grad():
        model.projection.weight.zero_()
        model.projection.bias.copy_(torch.from_numpy(table.lookup(token).astype(np.float32)))
    model.eval()
    return TrainedExplainer(model, list(table.tokens), table_fingerprint(table))
