#!/usr/bin/env python3
# Tests for filter probing strategies and word explanations

import os
import sys
import unittest
import tempfile
from pathlib import Path

import numpy as np
import torch

# Add project root to path to import the utils package
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from utils.errors import ConfigError, EmptyExplanationError, FilterLexError, UnsupportedOperationError
from utils.backbone import (FEATURE_DUMP, BackboneHandle, ThresholdTable, compute_thresholds, extract,
                            extract_features, train_toy_backbone)
from utils.explainer import ExplainerModel, TrainedExplainer
from utils.reference_data import load_image
from utils.probe import (ACTIVATION_MASKING, FILTER_ATTENTION, IMAGE_MASKING, ORIGINAL_IMAGE, Explanation,
                         ProbeStrategy, apply_strategy, attention_weights, count_discovered_concepts,
                         explain_filter, explain_model, filter_attention, rank_words, read_explanations,
                         resolve_strategy_name, write_explanations)
from tests.helper import constant_thresholds, fixed_explainer, make_corpus, make_table, random_features, tiny_arch

TOKENS = ['square', 'disc', 'roof', 'wave', 'stripes']


class TestFilterAttention(unittest.TestCase):
    """Cosine attention between a filter and every channel"""

    def test_self_weight_is_one(self):
        values = random_features(n=1, d=5, seed=1).values[0]
        for u in range(5):
            self.assertEqual(attention_weights(values, u)[u], 1.0)

    def test_orthogonal_and_scaled_channels(self):
        values = np.zeros((3, 2, 2), dtype=np.float32)
        values[0] = [[1, 0], [0, 0]]
        values[1] = [[0, 1], [0, 0]]
        values[2] = 2 * values[0]
        weights = attention_weights(values, 0)
        np.testing.assert_allclose(weights, [1.0, 0.0, 1.0])
        np.testing.assert_allclose(filter_attention(values, 0)[2], values[2])
        self.assertFalse(filter_attention(values, 0)[1].any())

    def test_range(self):
        rng = np.random.default_rng(4)
        values = rng.standard_normal((6, 3, 3))
        for u in range(6):
            weights = attention_weights(values, u)
            self.assertTrue(np.all(weights >= -1.0) and np.all(weights <= 1.0))

    def test_negative_weights_can_be_clamped(self):
        values = np.zeros((2, 1, 2), dtype=np.float32)
        values[0] = [[1, 0]]
        values[1] = [[-1, 0]]
        self.assertAlmostEqual(attention_weights(values, 0)[1], -1.0)
        self.assertFalse(filter_attention(values, 0, clamp_negative=True)[1].any())

    def test_scale_invariance(self):
        values = random_features(n=1, d=4, seed=2).values[0].astype(np.float64)
        np.testing.assert_allclose(attention_weights(2 * values, 1), attention_weights(values, 1))

    def test_permutation_equivariance(self):
        values = np.random.default_rng(6).standard_normal((5, 3, 3))
        perm = np.array([3, 0, 4, 1, 2])
        permuted = values[perm]
        for u in range(5):
            i = int(np.where(perm == u)[0][0])
            np.testing.assert_allclose(attention_weights(permuted, i), attention_weights(values, u)[perm])

    def test_zero_filter_gives_zero_weights(self):
        values = random_features(n=1, d=3, seed=3).values[0]
        values[1] = 0.0
        self.assertFalse(attention_weights(values, 1).any())
        out, empty = apply_strategy(ProbeStrategy('attention'), None, values, 1)
        self.assertTrue(empty)
        self.assertFalse(out.any())

    def test_out_of_range_filter(self):
        with self.assertRaises(FilterLexError):
            attention_weights(np.ones((2, 2, 2)), 2)


class TestStrategies(unittest.TestCase):
    """Explainer inputs produced by each probing strategy"""

    def test_aliases(self):
        self.assertEqual(resolve_strategy_name('attention'), FILTER_ATTENTION)
        self.assertEqual(resolve_strategy_name('original'), ORIGINAL_IMAGE)
        self.assertEqual(resolve_strategy_name('image-mask'), IMAGE_MASKING)
        self.assertEqual(resolve_strategy_name(ACTIVATION_MASKING), ACTIVATION_MASKING)
        with self.assertRaises(ConfigError):
            resolve_strategy_name('saliency')

    def test_masking_needs_thresholds(self):
        with self.assertRaises(ConfigError):
            ProbeStrategy('act-mask')

    def test_original_is_unchanged(self):
        values = random_features(n=1, seed=5).values[0]
        out, empty = apply_strategy(ProbeStrategy('original'), None, values, 0)
        np.testing.assert_array_equal(out, values)
        self.assertFalse(empty)

    def test_activation_masking(self):
        values = np.zeros((2, 2, 2), dtype=np.float32)
        values[0] = [[0.9, 0.1], [0.6, 0.0]]
        values[1] = [[1.0, 2.0], [3.0, 4.0]]
        strategy = ProbeStrategy('act-mask', constant_thresholds(2, 0.5))
        out, empty = apply_strategy(strategy, None, values, 0)
        self.assertFalse(empty)
        np.testing.assert_array_equal(out[1], [[1.0, 0.0], [3.0, 0.0]])

        quiet = np.full((2, 2, 2), 0.5, dtype=np.float32)
        _, empty = apply_strategy(strategy, None, quiet, 0)
        self.assertTrue(empty)

    def test_image_masking_on_feature_dump(self):
        dump = BackboneHandle(FEATURE_DUMP, {'dump': 2})
        strategy = ProbeStrategy('image-mask', constant_thresholds(2, 0.0, layer='dump'))
        with self.assertRaises(UnsupportedOperationError):
            apply_strategy(strategy, dump, np.ones((2, 2, 2), np.float32), 0, np.ones((3, 8, 8), np.float32))

    def test_image_masking_without_threshold_reproduces_extraction(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest, _ = make_corpus(Path(tmp) / 'corpus', n_images=2, seed=3)
            handle = train_toy_backbone(manifest, tiny_arch(), epochs=0, seed=0)
            image = load_image(manifest.entries[0])
            values = extract(handle, image, 'conv2').values
            thresholds = ThresholdTable('conv2', 0.005, np.full(8, -np.inf), 0)
            out, empty = apply_strategy(ProbeStrategy('image-mask', thresholds), handle, values, 3, image, 'conv2')
        self.assertFalse(empty)
        np.testing.assert_array_equal(out, values)


class TestRankWords(unittest.TestCase):
    """Frequency ranking of collected words"""

    def test_order_and_ties(self):
        collected = [('disc', 0.5), ('roof', 0.4), ('disc', 0.7), ('wave', 0.9), ('roof', 0.4), ('apple', 0.9)]
        ranked = rank_words(collected)
        self.assertEqual([t for t, _, _ in ranked], ['disc', 'roof', 'apple', 'wave'])
        self.assertEqual(ranked[0][1], 2)
        self.assertAlmostEqual(ranked[0][2], 0.6)


class TestExplainFilter(unittest.TestCase):
    """Per-filter explanations with a fixed-output explainer"""

    def setUp(self):
        self.table = make_table(TOKENS, dim=8, seed=0)
        self.explainer = fixed_explainer(self.table, 'square', in_channels=4)
        self.features = random_features(n=6, d=4, seed=1)
        self.original = ProbeStrategy('original')

    def explain(self, u, strategy=None, **params):
        return explain_filter(None, self.explainer, self.table, self.features, None, u,
                              strategy or self.original, **params)

    def test_unanimous_word(self):
        explanation = self.explain(2, s=1, p=3, x=1)
        self.assertEqual(explanation.words, [('square', 3, explanation.words[0][2])])
        self.assertAlmostEqual(explanation.words[0][2], 1.0, places=5)
        self.assertEqual(explanation.top(), ['square'])
        self.assertEqual(len(explanation.evidence), 3)

    def test_counts_sum_to_s_times_p(self):
        explanation = self.explain(0, s=3, p=4, x=2)
        self.assertEqual(sum(c for _, c, _ in explanation.words), 12)
        self.assertEqual(len(explanation.top()), 2)
        self.assertEqual(explanation.params, {'s': 3, 'p': 4, 'x': 2})

    def test_evidence_follows_activation_order(self):
        explanation = self.explain(1, s=1, p=6, x=1)
        maxima = [a for _, _, a in explanation.evidence]
        self.assertEqual(maxima, sorted(maxima, reverse=True))

    def test_all_images_empty(self):
        self.features.values[:, 3] = 0.0
        with self.assertRaises(EmptyExplanationError) as ctx:
            self.explain(3, ProbeStrategy('attention'), s=1, p=3, x=1)
        self.assertEqual(ctx.exception.filter_index, 3)

    def test_invalid_parameters(self):
        with self.assertRaises(ConfigError):
            self.explain(0, s=0)

    def test_channel_mismatch_is_not_swallowed(self):
        features = random_features(n=6, d=5, seed=1)
        with self.assertRaises(FilterLexError) as ctx:
            explain_filter(None, self.explainer, self.table, features, None, 0, self.original, s=1, p=3, x=1)
        self.assertNotIsInstance(ctx.exception, EmptyExplanationError)

    def test_zero_norm_outputs_are_skipped(self):
        model = ExplainerModel(4, self.table.dim)
        with torch.no_grad():
            model.projection.weight.zero_()
            model.projection.bias.zero_()
        silent = TrainedExplainer(model, list(self.table.tokens), '')
        with self.assertRaises(EmptyExplanationError):
            explain_filter(None, silent, self.table, self.features, None, 0, self.original, s=1, p=3, x=1)



class TestExplainModel(unittest.TestCase):
    """All-filter explanations, persistence and concept counts"""

    def setUp(self):
        self.table = make_table(TOKENS, dim=8, seed=0)
        self.explainer = fixed_explainer(self.table, 'disc', in_channels=4)
        self.features = random_features(n=6, d=4, seed=7)
        self.features.values[:, 1] = 0.0
        self.strategy = ProbeStrategy('attention')

    def run_model(self, **kwargs):
        return explain_model(None, self.explainer, self.table, self.features, None, self.strategy,
                             s=2, p=3, x=2, **kwargs)

    def test_failures_are_reported_per_filter(self):
        with self.assertLogs('utils.probe', level='WARNING'):
            explanations, failures = self.run_model()
        self.assertEqual([e.filter for e in explanations], [0, 2, 3])
        self.assertEqual(list(failures), [1])

    def test_subset_keeps_requested_order(self):
        explanations, failures = self.run_model(filters=[3, 0])
        self.assertEqual([e.filter for e in explanations], [3, 0])
        self.assertEqual(failures, {})

    def test_parallel_matches_serial(self):
        serial, _ = self.run_model(filters=[0, 2, 3])
        parallel, _ = self.run_model(filters=[0, 2, 3], jobs=3)
        self.assertEqual([e.to_record() for e in serial], [e.to_record() for e in parallel])

    def test_jsonl_round_trip(self):
        explanations, _ = self.run_model(filters=[0, 2])
        with tempfile.TemporaryDirectory() as tmp:
            path = write_explanations(explanations, Path(tmp) / 'explanations.jsonl')
            lines = path.read_text(encoding='utf-8').splitlines()
            restored = read_explanations(path)
        self.assertEqual(len(lines), 2)
        self.assertEqual(restored[0].to_record(), explanations[0].to_record())
        self.assertEqual(set(explanations[1].to_record()),
                         {'filter', 'layer', 'strategy', 'params', 'words', 'evidence', 'skipped_images'})

    def test_count_discovered_concepts(self):
        def made(u, word):
            return Explanation(u, 'conv2', FILTER_ATTENTION, [(word, 1, 0.5)], [], {'s': 1, 'p': 1, 'x': 1})

        explanations = [made(0, 'roof'), made(1, 'disc'), made(2, 'roof'),
                        Explanation(3, 'conv2', FILTER_ATTENTION, [], [], {'s': 1, 'p': 1, 'x': 1})]
        self.assertEqual(count_discovered_concepts(explanations), {'disc': 1, 'roof': 2})
        self.assertEqual(count_discovered_concepts(explanations, vocabulary=['disc']), {'disc': 1})


class TestParallelImageMasking(unittest.TestCase):
    """Worker threads re-running the backbone on masked pixels"""

    def test_parallel_matches_serial(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest, _ = make_corpus(Path(tmp) / 'corpus', n_images=8, seed=6)
            handle = train_toy_backbone(manifest, tiny_arch(), epochs=0, seed=1)
            features = extract_features(handle, manifest, 'conv2')
            strategy = ProbeStrategy('image-mask', compute_thresholds(features, quantile_p=0.05))
            table = make_table(TOKENS, dim=8, seed=2)
            torch.manual_seed(0)
            explainer = TrainedExplainer(ExplainerModel(8, table.dim).eval(), list(table.tokens), '')

            def run(jobs):
                explanations, failures = explain_model(handle, explainer, table, features, manifest, strategy,
                                                       s=2, p=4, x=2, jobs=jobs)
                return [e.to_record() for e in explanations], failures

            serial = run(1)
            for _ in range(3):
                self.assertEqual(run(4), serial)


if __name__ == '__main__':
    unittest.main()
